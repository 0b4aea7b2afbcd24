use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Components of the combined objective `global + gamma * local`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts<S> {
    pub total: S,
    pub global: S,
    pub local: S,
}

/// Mean squared noise error plus a foreground-restricted term.
///
/// `fg` is the binary foreground indicator over pixels, broadcast across
/// channels; both terms divide by the full element count.
pub fn loss<S: Scalar>(eps_hat: &[S], eps: &[S], fg: &[S], gamma: S) -> Result<LossParts<S>> {
    Ok(loss_with_grad(eps_hat, eps, fg, gamma)?.0)
}

/// [`loss`] together with its gradient with respect to `eps_hat`.
pub fn loss_with_grad<S: Scalar>(eps_hat: &[S], eps: &[S], fg: &[S], gamma: S) -> Result<(LossParts<S>, Vec<S>)> {
    if eps_hat.len() != eps.len() {
        return Err(Error::invalid("eps_hat and eps shapes differ"));
    }
    if fg.is_empty() || eps.len() % fg.len() != 0 {
        return Err(Error::invalid("foreground mask does not tile the noise tensor"));
    }
    if gamma < S::zero() {
        return Err(Error::invalid("gamma must be non-negative"));
    }
    let plane = fg.len();
    let n = S::lit(eps.len() as f64);
    let two_over_n = S::lit(2.0) / n;
    let (mut global, mut local) = (S::zero(), S::zero());
    let mut grad = vec![S::zero(); eps.len()];
    for (i, g) in grad.iter_mut().enumerate() {
        let d = eps_hat[i] - eps[i];
        let f = fg[i % plane];
        global += d * d;
        let fd = f * d;
        local += fd * fd;
        *g = two_over_n * (d + gamma * f * fd);
    }
    let (global, local) = (global / n, local / n);
    Ok((
        LossParts {
            total: global + gamma * local,
            global,
            local,
        },
        grad,
    ))
}
