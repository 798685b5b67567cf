//! Residual-normalization strategies and their depth-dependent constants.
//!
//! Every strategy here is a rule for combining a block's input `x` with a
//! sublayer output `G(x)`:
//!
//! * `postln`     — `LN(x + G(x))`
//! * `preln`      — `x + G(LN(x))`, with one final LN after the stack
//! * `deepnorm`   — `LN(alpha * x + G(x))`, residual-branch weights scaled
//!                  by beta at initialization
//! * `upscale`    — `LN(alpha * x + G(x))` with branch weights left alone
//! * `foundation` — `LN(alpha * x + G(x))` with alpha fixed at 0.974,
//!                  independent of depth
//!
//! The alpha constants grow with depth so that each block's contribution is
//! damped relative to the accumulated residual stream; layer norm's positive
//! scale invariance means alpha changes the mix, not the output magnitude.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Real;
use std::fmt;
use std::str::FromStr;

/// Depth-independent residual weight used by the `foundation` strategy.
pub const FOUNDATION_ALPHA: f64 = 0.974;

/// Default layer-norm epsilon used throughout the models.
pub const DEFAULT_LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NormKind {
    PostLn,
    PreLn,
    DeepNorm,
    UpscaleLn,
    FoundationLn,
}

impl NormKind {
    pub const ALL: [NormKind; 5] = [
        NormKind::PostLn,
        NormKind::PreLn,
        NormKind::DeepNorm,
        NormKind::UpscaleLn,
        NormKind::FoundationLn,
    ];

    /// Name used in config files and CSV output.
    pub fn config_name(self) -> &'static str {
        match self {
            NormKind::PostLn => "postln",
            NormKind::PreLn => "preln",
            NormKind::DeepNorm => "deepnorm",
            NormKind::UpscaleLn => "upscale",
            NormKind::FoundationLn => "foundation",
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.config_name())
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "postln" => Ok(NormKind::PostLn),
            "preln" => Ok(NormKind::PreLn),
            "deepnorm" => Ok(NormKind::DeepNorm),
            "upscale" => Ok(NormKind::UpscaleLn),
            "foundation" => Ok(NormKind::FoundationLn),
            other => Err(Error::config(format!(
                "unknown norm strategy `{other}`; valid: postln, preln, deepnorm, upscale, foundation"
            ))),
        }
    }
}

/// Where in an architecture the normalized stack sits. The alpha formulas
/// differ between encoder and decoder stacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchRole {
    EncoderOnly,
    EncoderOfEncDec,
    DecoderOfEncDec,
    DecoderOnly,
}

/// Residual weight for a given strategy, role, and depth.
///
/// For the depth-scaled strategies (`deepnorm`, `upscale`):
/// encoder-only stacks use `(2N)^(1/4)`; the encoder of an
/// encoder-decoder uses `0.81 (N^4 M)^(1/16)` (M = decoder depth, required);
/// the decoder of an encoder-decoder uses `(3N)^(1/4)`; a decoder-only
/// stack uses `(2N)^(1/4)`, the same form as an encoder-only one.
/// `foundation` is always 0.974 and `postln`/`preln` are always 1.
pub fn alpha_for(kind: NormKind, arch_role: ArchRole, n: usize, m: Option<usize>) -> Result<f64> {
    if n < 1 {
        return Err(Error::config("layer count N must be >= 1"));
    }
    match kind {
        NormKind::PostLn | NormKind::PreLn => Ok(1.0),
        NormKind::FoundationLn => Ok(FOUNDATION_ALPHA),
        NormKind::DeepNorm | NormKind::UpscaleLn => match arch_role {
            ArchRole::EncoderOnly | ArchRole::DecoderOnly => Ok((2.0 * n as f64).powf(0.25)),
            ArchRole::EncoderOfEncDec => {
                let m = m.ok_or_else(|| {
                    Error::config("decoder layer count M is required for an encoder-of-encoder-decoder alpha")
                })?;
                if m < 1 {
                    return Err(Error::config("decoder layer count M must be >= 1"));
                }
                Ok(0.81 * ((n as f64).powi(4) * m as f64).powf(1.0 / 16.0))
            }
            ArchRole::DecoderOfEncDec => Ok((3.0 * n as f64).powf(0.25)),
        },
    }
}

/// A fully resolved residual-normalization rule: which pattern, plus the
/// alpha and beta constants it uses.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStrategy {
    pub kind: NormKind,
    pub alpha: f64,
    pub beta: f64,
    pub arch_role: ArchRole,
}

impl NormStrategy {
    /// Strategy with alpha from [`alpha_for`] and beta = 1.
    pub fn new(kind: NormKind, arch_role: ArchRole, n: usize, m: Option<usize>) -> Result<Self> {
        Self::with_overrides(kind, arch_role, n, m, None, None)
    }

    /// Strategy with optional explicit alpha (ablations) and beta
    /// (DeepNorm weight scaling; rejected for strategies that fix beta = 1).
    pub fn with_overrides(
        kind: NormKind,
        arch_role: ArchRole,
        n: usize,
        m: Option<usize>,
        alpha_override: Option<f64>,
        beta: Option<f64>,
    ) -> Result<Self> {
        let alpha = match alpha_override {
            Some(a) => {
                if matches!(kind, NormKind::PostLn | NormKind::PreLn) && a != 1.0 {
                    return Err(Error::config(format!(
                        "{kind} fixes alpha = 1; it cannot be overridden to {a}"
                    )));
                }
                a
            }
            None => alpha_for(kind, arch_role, n, m)?,
        };
        let beta = match beta {
            Some(b) => {
                let beta_is_free = matches!(kind, NormKind::DeepNorm);
                if !beta_is_free && b != 1.0 {
                    return Err(Error::config(format!(
                        "{kind} holds residual-branch weights unscaled (beta = 1); got beta = {b}"
                    )));
                }
                b
            }
            None => 1.0,
        };
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::config(format!("alpha must be positive and finite, got {alpha}")));
        }
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::config(format!("beta must be positive and finite, got {beta}")));
        }
        Ok(NormStrategy {
            kind,
            alpha,
            beta,
            arch_role,
        })
    }

    /// Whether block wiring normalizes after the residual add
    /// (everything except `preln`).
    pub fn post_style(&self) -> bool {
        self.kind != NormKind::PreLn
    }
}

/// Combines a residual stream with a sublayer output under a strategy.
///
/// For post-style strategies this is `LN(alpha * x + sublayer_out)` with the
/// given LN parameters. For `preln` it is plain `x + sublayer_out`; the LN
/// belongs on the sublayer's input, which is the caller's wiring concern.
pub fn residual_combine<T: Real>(
    graph: &mut Graph<T>,
    x: Var,
    sublayer_out: Var,
    strategy: &NormStrategy,
    ln_gamma: Var,
    ln_beta: Var,
    eps: T,
) -> Result<Var> {
    if graph.shape(x) != graph.shape(sublayer_out) {
        return Err(Error::ShapeMismatch {
            op: "residual_combine",
            lhs: graph.shape(x).to_vec(),
            rhs: graph.shape(sublayer_out).to_vec(),
        });
    }
    if strategy.post_style() {
        // postln is the alpha = 1 case of the same path, not a separate one.
        let scaled = graph.scale(x, T::from_f64(strategy.alpha))?;
        let summed = graph.add(scaled, sublayer_out)?;
        graph.layer_norm(summed, ln_gamma, ln_beta, eps)
    } else {
        graph.add(x, sublayer_out)
    }
}

/// Scales residual-branch weights by beta, once, at initialization.
///
/// Only `deepnorm` scales anything, and only the FFN matrices and the
/// attention value/output projections. A second invocation, or one after
/// training has begun, is a lifecycle error rather than a silent re-scale.
pub fn apply_beta_scaling<T: Real>(params: &mut ParamStore<T>, strategy: &NormStrategy) -> Result<()> {
    if params.beta_applied() {
        return Err(Error::Lifecycle(
            "beta scaling has already been applied to this parameter store".into(),
        ));
    }
    if params.training_started() {
        return Err(Error::Lifecycle(
            "beta scaling must happen before any training step".into(),
        ));
    }
    if strategy.kind == NormKind::DeepNorm && strategy.beta != 1.0 {
        let beta = T::from_f64(strategy.beta);
        for entry in params.entries_mut() {
            if entry.role.beta_scaled() {
                for w in entry.tensor.data_mut() {
                    *w = *w * beta;
                }
            }
        }
    }
    params.set_beta_applied();
    Ok(())
}
