use crate::scalar::Scalar;

use super::{AutodiffError, Tape, Tensor, Var};

/// Central-difference step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;

fn evaluate<T, E, F>(f: &F, point: &[Tensor<T>]) -> Result<(T, Vec<Tensor<T>>), E>
where
    T: Scalar,
    E: From<AutodiffError>,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>, E>,
{
    let tape = Tape::new();
    let leaves: Vec<Var<'_, T>> = point.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&tape, &leaves)?;
    let value = out.item().ok_or_else(|| AutodiffError::NotScalar(out.shape()))?;
    if !value.is_finite() {
        return Err(AutodiffError::NonFinite(format!("function value {value}")).into());
    }
    let grads = tape.backward(out)?;
    Ok((value, leaves.iter().map(|&l| grads.get_or_zeros(l)).collect()))
}

fn value_at<T, E, F>(f: &F, point: &[Tensor<T>]) -> Result<T, E>
where
    T: Scalar,
    E: From<AutodiffError>,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>, E>,
{
    let tape = Tape::new();
    let leaves: Vec<Var<'_, T>> = point.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&tape, &leaves)?;
    let value = out.item().ok_or_else(|| AutodiffError::NotScalar(out.shape()))?;
    if !value.is_finite() {
        return Err(AutodiffError::NonFinite(format!("function value {value}")).into());
    }
    Ok(value)
}

/// Central-difference gradient of the scalar graph `f` at `point`.
pub fn central_difference<T, E, F>(f: F, point: &[Tensor<T>], step: T) -> Result<Vec<Tensor<T>>, E>
where
    T: Scalar,
    E: From<AutodiffError>,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>, E>,
{
    let mut probe = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    let two_h = step + step;
    for i in 0..point.len() {
        let mut g = Tensor::zeros(point[i].shape());
        for j in 0..point[i].numel() {
            let orig = point[i].data()[j];
            probe[i].data_mut()[j] = orig + step;
            let plus = value_at(&f, &probe)?;
            probe[i].data_mut()[j] = orig - step;
            let minus = value_at(&f, &probe)?;
            probe[i].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / two_h;
        }
        out.push(g);
    }
    Ok(out)
}

/// Maximum relative disagreement between reverse-mode and central-difference
/// gradients of `f` at `point`:
/// `max_i |g_ad,i − g_fd,i| / (|g_fd,i| + 1e−8)` with step [`GRAD_CHECK_STEP`].
pub fn grad_check<T, E, F>(f: F, point: &[Tensor<T>]) -> Result<T, E>
where
    T: Scalar,
    E: From<AutodiffError>,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>, E>,
{
    let (_, analytic) = evaluate(&f, point)?;
    let numeric = central_difference(&f, point, T::lit(GRAD_CHECK_STEP))?;
    let floor = T::lit(1e-8);
    let mut worst = T::zero();
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&ga, &gn) in a.data().iter().zip(n.data()) {
            if !ga.is_finite() || !gn.is_finite() {
                return Err(AutodiffError::NonFinite(format!("gradient pair ({ga}, {gn})")).into());
            }
            worst = worst.max((ga - gn).abs() / (gn.abs() + floor));
        }
    }
    Ok(worst)
}
