use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn check_p(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::OutOfRange {
            op: "dropout",
            value: p,
            range: "[0, 1)",
        });
    }
    Ok(())
}

/// Inverted-dropout mask: each entry is 0 with probability `p`, otherwise `1 / (1 - p)`.
pub fn sample_mask<T: Scalar, R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Result<Vec<T>> {
    check_p(p)?;
    if p == 0.0 {
        return Ok(vec![T::one(); len]);
    }
    let keep = T::lit(1.0 / (1.0 - p));
    Ok((0..len)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect())
}

/// Applies dropout to `x`, returning the output and the scaled mask used.
/// In [`Mode::Eval`] the input passes through unchanged with an all-ones mask.
pub fn apply_dropout<T: Scalar, R: Rng + ?Sized>(
    x: &[T],
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Vec<T>, Vec<T>)> {
    check_p(p)?;
    let mask = match mode {
        Mode::Eval => vec![T::one(); x.len()],
        Mode::Train => sample_mask(x.len(), p, rng)?,
    };
    let y = match mode {
        Mode::Eval => x.to_vec(),
        Mode::Train => x.iter().zip(&mask).map(|(&a, &m)| a * m).collect(),
    };
    Ok((y, mask))
}
