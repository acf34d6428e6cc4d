//! Physics-gated latent ODE.
//!
//! ```text
//! z(0) = encode(history)
//! dz/dt = f_θ(z, t) ⊙ G,   G = 1 + σ(Conv1x1(CAPE↓, ω500↓)) · β
//! forecast = decode(z(1))
//! ```
//!
//! `↓` is 4×4 average pooling to the latent grid. The gate is computed from
//! the last history day and held fixed over `t ∈ [0, 1]`, which is
//! integrated with `S` classical RK4 steps.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::grid::{Predictor, N_PREDICTORS};
use crate::scalar::Scalar;

use super::params::{add_conv, add_conv_uniform, conv, BoundParams, ParamStore};
use super::{check_divisible, ModelConfig, ModelError, Outputs, DOWNSAMPLE};

/// Half-width of the uniform initialisation of the gate convolution.
const GATE_INIT: f64 = 0.01;

/// Half-width of the uniform initialisation of the last layer of `f_θ`, so
/// the flow starts close to the identity.
const FLOW_INIT: f64 = 1e-4;

pub(crate) fn init_params<T: Scalar>(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ParamStore<T> {
    let (l, hid) = (cfg.latent_channels, cfg.hidden_channels);
    let mut p = ParamStore::new();
    add_conv(&mut p, rng, "enc1", cfg.input_channels(), l, 3);
    add_conv(&mut p, rng, "enc2", l, l, 3);
    add_conv(&mut p, rng, "f1", l + 1, hid, 3);
    add_conv_uniform(&mut p, rng, "f2", hid, l, 3, FLOW_INIT);
    add_conv_uniform(&mut p, rng, "gate", 2, 1, 1, GATE_INIT);
    p.insert("beta", Tensor::scalar(T::lit(cfg.beta_init)));
    init_decoder(&mut p, rng, cfg);
    p
}

pub(crate) fn init_decoder<T: Scalar>(p: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) {
    let (l, e) = (cfg.latent_channels, cfg.encoder_channels());
    add_conv(p, rng, "dec1", l, l, 3);
    add_conv(p, rng, "dec2", l, e, 3);
    add_conv(p, rng, "head_int", e, 1, 1);
    add_conv(p, rng, "head_prob", e, 1, 1);
}

/// Two conv + tanh + 2×2 max-pool blocks: `[N, 6·T, H, W]` to
/// `[N, L, H/4, W/4]`.
pub fn encode<'t, T: Scalar>(
    tape: &'t Tape<T>,
    p: &BoundParams<'t, T>,
    x: Var<'t, T>,
) -> Result<Var<'t, T>, ModelError> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(ModelError::Shape(format!("encoder input {shape:?} is not [N, C, H, W]")));
    }
    check_divisible(shape[2], shape[3])?;
    let h = tape.tanh(conv(tape, p, "enc1", x)?)?;
    let h = tape.max_pool(h, 2)?;
    let z = tape.tanh(conv(tape, p, "enc2", h)?)?;
    Ok(tape.max_pool(z, 2)?)
}

/// `1 + σ(Conv1x1([cape↓, ω↓])) · β` on the latent grid. `cape` and `omega`
/// are normalized `[N, 1, H, W]` fields; `beta` is a one-element node.
pub fn physics_gate<'t, T: Scalar>(
    tape: &'t Tape<T>,
    p: &BoundParams<'t, T>,
    cape: Var<'t, T>,
    omega: Var<'t, T>,
    beta: Var<'t, T>,
) -> Result<Var<'t, T>, ModelError> {
    if cape.shape() != omega.shape() {
        return Err(ModelError::Shape(format!("gate inputs {:?} and {:?} differ", cape.shape(), omega.shape())));
    }
    let cape = tape.avg_pool(cape, DOWNSAMPLE)?;
    let omega = tape.avg_pool(omega, DOWNSAMPLE)?;
    let physics = tape.concat_channels(&[cape, omega])?;
    let pre = tape.conv1x1(physics, p.get("gate.w")?, p.get("gate.b")?)?;
    let amp = tape.scale_by(tape.sigmoid(pre)?, beta)?;
    Ok(tape.shift(amp, T::one())?)
}

/// `f_θ(z, t)`: 3×3 conv to the hidden width, tanh, 3×3 conv back to `L`
/// channels, with `t` appended as a constant input channel.
pub fn latent_derivative<'t, T: Scalar>(
    tape: &'t Tape<T>,
    p: &BoundParams<'t, T>,
    z: Var<'t, T>,
    t: T,
) -> Result<Var<'t, T>, ModelError> {
    let shape = z.shape();
    if shape.len() != 4 {
        return Err(ModelError::Shape(format!("latent state {shape:?} is not [N, L, H', W']")));
    }
    let time = tape.constant(Tensor::full(&[shape[0], 1, shape[2], shape[3]], t));
    let zt = tape.concat_channels(&[z, time])?;
    let h = tape.tanh(conv(tape, p, "f1", zt)?)?;
    conv(tape, p, "f2", h)
}

/// Integrates `dz/dt = f(z, t) ⊙ gate` from `t = 0` to `t = 1` with `steps`
/// classical RK4 steps. `gate` is `[N, 1, H', W']`, broadcast over channels;
/// `None` integrates `f` alone.
pub fn integrate_gated_rk4<'t, T, F>(
    tape: &'t Tape<T>,
    mut f: F,
    z0: Var<'t, T>,
    gate: Option<Var<'t, T>>,
    steps: usize,
) -> Result<Var<'t, T>, ModelError>
where
    T: Scalar,
    F: FnMut(Var<'t, T>, T) -> Result<Var<'t, T>, ModelError>,
{
    if steps == 0 {
        return Err(ModelError::InvalidConfig("rk4_steps must be at least 1".into()));
    }
    let h = T::one() / T::from_usize(steps).unwrap();
    let half = h / T::lit(2.0);
    let mut rate = |z: Var<'t, T>, t: T| -> Result<Var<'t, T>, ModelError> {
        let k = f(z, t)?;
        match gate {
            Some(g) => Ok(tape.mul_channel(k, g)?),
            None => Ok(k),
        }
    };
    let mut z = z0;
    for step in 0..steps {
        let t = T::from_usize(step).unwrap() * h;
        let k1 = rate(z, t)?;
        let k2 = rate(tape.add(z, tape.scale(k1, half)?)?, t + half)?;
        let k3 = rate(tape.add(z, tape.scale(k2, half)?)?, t + half)?;
        let k4 = rate(tape.add(z, tape.scale(k3, h)?)?, t + h)?;
        let mid = tape.add(k2, k3)?;
        let sum = tape.add(tape.add(k1, k4)?, tape.add(mid, mid)?)?;
        z = tape.add(z, tape.scale(sum, h / T::lit(6.0))?)?;
        if !z.value().all_finite() {
            return Err(ModelError::NonFiniteState { step: step + 1 });
        }
    }
    Ok(z)
}

/// Two nearest-upsample + 3×3 conv + tanh blocks, then the 1×1 heads.
pub fn decode<'t, T: Scalar>(
    tape: &'t Tape<T>,
    p: &BoundParams<'t, T>,
    z: Var<'t, T>,
) -> Result<Outputs<'t, T>, ModelError> {
    let h = tape.upsample_nearest(z, 2)?;
    let h = tape.tanh(conv(tape, p, "dec1", h)?)?;
    let h = tape.upsample_nearest(h, 2)?;
    let h = tape.tanh(conv(tape, p, "dec2", h)?)?;
    let log_intensity = conv(tape, p, "head_int", h)?;
    let exceed_prob = tape.sigmoid(conv(tape, p, "head_prob", h)?)?;
    Ok(Outputs { log_intensity, exceed_prob })
}

pub(crate) fn forward<'t, T: Scalar>(
    tape: &'t Tape<T>,
    p: &BoundParams<'t, T>,
    cfg: &ModelConfig,
    input: Var<'t, T>,
    gated: bool,
) -> Result<Outputs<'t, T>, ModelError> {
    let z0 = encode(tape, p, input)?;
    let gate = if gated {
        let last = (cfg.history_t - 1) * N_PREDICTORS;
        let cape = tape.slice_channels(input, last + Predictor::Cape as usize, 1)?;
        let omega = tape.slice_channels(input, last + Predictor::Omega500 as usize, 1)?;
        Some(physics_gate(tape, p, cape, omega, p.get("beta")?)?)
    } else {
        None
    };
    let z1 = integrate_gated_rk4(tape, |z, t| latent_derivative(tape, p, z, t), z0, gate, cfg.rk4_steps)?;
    decode(tape, p, z1)
}
