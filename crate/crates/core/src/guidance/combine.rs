use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// ε_u + s(ε_c − ε_u).
pub fn cfg_score(eps_uncond: &Tensor, eps_cond: &Tensor, s: f64) -> Result<Tensor> {
    same_shape("cfg_score", eps_uncond, eps_cond)?;
    // s = 1 is the conditional score; skip the round trip so it is exact.
    if s == 1.0 {
        return Ok(eps_cond.clone());
    }
    eps_uncond.add(&eps_cond.sub(eps_uncond)?.mul_scalar(s))
}

/// CFG steering away from a negative condition instead of the null token.
pub fn negative_prompt_cfg(eps_neg: &Tensor, eps_cond: &Tensor, s: f64) -> Result<Tensor> {
    cfg_score(eps_neg, eps_cond, s)
}

/// ε(∅,∅) + s_c(ε(c,I) − ε(∅,I)) + s_I(ε(∅,I) − ε(∅,∅)).
pub fn pix2pix_score(eps_null_null: &Tensor, eps_c_i: &Tensor, eps_null_i: &Tensor, s_c: f64, s_i: f64) -> Result<Tensor> {
    same_shape("pix2pix_score", eps_null_null, eps_c_i)?;
    same_shape("pix2pix_score", eps_null_null, eps_null_i)?;
    eps_null_null
        .add(&eps_c_i.sub(eps_null_i)?.mul_scalar(s_c))?
        .add(&eps_null_i.sub(eps_null_null)?.mul_scalar(s_i))
}

/// Cosine similarity of the flattened predictions.
pub fn cosine_gamma(eps_cond: &Tensor, eps_uncond: &Tensor) -> Result<f64> {
    same_shape("cosine_gamma", eps_cond, eps_uncond)?;
    let (a, b) = (eps_cond.data(), eps_uncond.data());
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
