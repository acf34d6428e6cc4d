//! ConvLSTM baseline.
//!
//! Each history day is encoded to the latent grid by its own pass through
//! a two-block convolutional encoder; a ConvLSTM cell with `L` hidden
//! channels then steps over the days, and the final hidden state goes
//! through the same decoder architecture as PG-LODE.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::grid::N_PREDICTORS;
use crate::scalar::Scalar;

use super::params::{add_conv, conv, BoundParams, ParamStore};
use super::pglode::{decode, init_decoder};
use super::{check_divisible, ModelConfig, ModelError, Outputs};

pub(crate) fn init_params<T: Scalar>(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ParamStore<T> {
    let (l, e) = (cfg.latent_channels, cfg.encoder_channels());
    let mut p = ParamStore::new();
    add_conv(&mut p, rng, "day_enc1", N_PREDICTORS, e, 3);
    add_conv(&mut p, rng, "day_enc2", e, e, 3);
    add_conv(&mut p, rng, "cell", e + l, 4 * l, 3);
    init_decoder(&mut p, rng, cfg);
    p
}

/// One day `[N, 6, H, W]` to `[N, L/2, H/4, W/4]` features.
pub fn convlstm_encode_day<'t, T: Scalar>(
    tape: &'t Tape<T>,
    p: &BoundParams<'t, T>,
    x: Var<'t, T>,
) -> Result<Var<'t, T>, ModelError> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(ModelError::Shape(format!("day input {shape:?} is not [N, C, H, W]")));
    }
    check_divisible(shape[2], shape[3])?;
    let h = tape.tanh(conv(tape, p, "day_enc1", x)?)?;
    let h = tape.max_pool(h, 2)?;
    let h = tape.tanh(conv(tape, p, "day_enc2", h)?)?;
    Ok(tape.max_pool(h, 2)?)
}

/// One ConvLSTM update. The input, forget and output gates and the
/// candidate come from a single 3×3 convolution over `[x, h]`:
/// `c' = f ⊙ c + i ⊙ tanh(g)`, `h' = o ⊙ tanh(c')`.
pub fn convlstm_step<'t, T: Scalar>(
    tape: &'t Tape<T>,
    p: &BoundParams<'t, T>,
    h: Var<'t, T>,
    c: Var<'t, T>,
    x: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>), ModelError> {
    if h.shape() != c.shape() {
        return Err(ModelError::Shape(format!("hidden {:?} and cell {:?} differ", h.shape(), c.shape())));
    }
    let l = h.shape()[1];
    let gates = conv(tape, p, "cell", tape.concat_channels(&[x, h])?)?;
    let i = tape.sigmoid(tape.slice_channels(gates, 0, l)?)?;
    let f = tape.sigmoid(tape.slice_channels(gates, l, l)?)?;
    let o = tape.sigmoid(tape.slice_channels(gates, 2 * l, l)?)?;
    let g = tape.tanh(tape.slice_channels(gates, 3 * l, l)?)?;
    let c_next = tape.add(tape.mul(f, c)?, tape.mul(i, g)?)?;
    let h_next = tape.mul(o, tape.tanh(c_next)?)?;
    Ok((h_next, c_next))
}

pub(crate) fn forward<'t, T: Scalar>(
    tape: &'t Tape<T>,
    p: &BoundParams<'t, T>,
    cfg: &ModelConfig,
    input: Var<'t, T>,
) -> Result<Outputs<'t, T>, ModelError> {
    let shape = input.shape();
    let dims = [shape[0], cfg.latent_channels, shape[2] / 4, shape[3] / 4];
    let mut h = tape.constant(Tensor::zeros(&dims));
    let mut c = tape.constant(Tensor::zeros(&dims));
    for day in 0..cfg.history_t {
        let x = convlstm_encode_day(tape, p, tape.slice_channels(input, day * N_PREDICTORS, N_PREDICTORS)?)?;
        (h, c) = convlstm_step(tape, p, h, c, x)?;
    }
    decode(tape, p, h)
}
