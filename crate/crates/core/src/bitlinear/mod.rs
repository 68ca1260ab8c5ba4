//! Selective BitLinear layers and the linear-to-BitLinear replacement pass.
//!
//! The three quantized forwards, with `γ` computed per input row:
//!
//! | mode   | output                                              |
//! |--------|-----------------------------------------------------|
//! | Both   | `(Q8(γ·LN(x)) · Q1.58(β·W)ᵀ + b) / (β·γ)`           |
//! | Activ  | `(Q8(γ·LN(x)) · Wᵀ + b) / γ`                        |
//! | Weight | `(x · Q1.58(β·W)ᵀ + b) / β`                         |
//!
//! With [`BiasPolicy::PostDequant`] the bias is added after the division
//! instead. Quantizers are wrapped in straight-through nodes so gradients
//! reach `W` and `x`; `β` and `γ` are treated as constants.

mod tree;

use std::fmt;
use std::str::FromStr;

pub use tree::{
    collect_linears, count_replacement_sites, replace_linear, set_linear_mode, Child, ChildMut, LayerNode, LayerTree, Module,
    SiteCensus,
};

use crate::autodiff::{ParamId, ParamStore, SteMode, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::quant::{absmax_scale, absmean_scale, quantize_weights_ternary, QuantCodes, QuantRange, DEFAULT_EPS};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum QuantMode {
    #[default]
    None,
    Both,
    Activ,
    Weight,
}

impl QuantMode {
    pub const ALL: [QuantMode; 4] = [QuantMode::None, QuantMode::Both, QuantMode::Activ, QuantMode::Weight];

    pub fn quantizes_weights(self) -> bool {
        matches!(self, QuantMode::Both | QuantMode::Weight)
    }

    pub fn quantizes_activations(self) -> bool {
        matches!(self, QuantMode::Both | QuantMode::Activ)
    }

    pub fn name(self) -> &'static str {
        match self {
            QuantMode::None => "none",
            QuantMode::Both => "both",
            QuantMode::Activ => "activ",
            QuantMode::Weight => "weight",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            QuantMode::None => 0,
            QuantMode::Both => 1,
            QuantMode::Activ => 2,
            QuantMode::Weight => 3,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.tag() == t)
    }
}

impl fmt::Display for QuantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QuantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "fp" | "full" => Ok(QuantMode::None),
            "both" => Ok(QuantMode::Both),
            "activ" | "activation" => Ok(QuantMode::Activ),
            "weight" => Ok(QuantMode::Weight),
            other => Err(Error::Invalid(format!("unknown quantization mode `{other}`"))),
        }
    }
}

/// Where the bias enters relative to dequantization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BiasPolicy {
    /// `b` is divided by the scale(s) together with the product.
    #[default]
    Literal,
    /// `b` is added to the dequantized product.
    PostDequant,
}

impl BiasPolicy {
    pub fn name(self) -> &'static str {
        match self {
            BiasPolicy::Literal => "literal",
            BiasPolicy::PostDequant => "post_dequant",
        }
    }
}

impl FromStr for BiasPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(BiasPolicy::Literal),
            "post_dequant" => Ok(BiasPolicy::PostDequant),
            other => Err(Error::Invalid(format!("unknown bias policy `{other}`"))),
        }
    }
}

/// Settings shared by every layer created by [`replace_linear`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BitLinearConfig {
    pub eps: f64,
    pub bias_policy: BiasPolicy,
    pub ste: SteMode,
}

impl Default for BitLinearConfig {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            bias_policy: BiasPolicy::Literal,
            ste: SteMode::Clipped,
        }
    }
}

/// Plain `y = x·Wᵀ + b` with `W: [out × in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    /// Registers fresh parameters; weights ~ N(0, std²), bias zero.
    pub fn init<T: Scalar, R: rand::Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::randn(&[out_dim, in_dim], std, rng), true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), false));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.matmul_nt(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// A linear layer with a quantization mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BitLinearLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub mode: QuantMode,
    pub eps: f64,
    pub bias_policy: BiasPolicy,
    pub ste: SteMode,
    /// Gain of the internal LayerNorm; `None` keeps it non-affine.
    pub ln_gain: Option<ParamId>,
}

impl BitLinearLayer {
    /// Wraps the parameters of `linear`, sharing its storage.
    pub fn from_linear(linear: &LinearLayer, mode: QuantMode, cfg: &BitLinearConfig) -> Self {
        Self {
            weight: linear.weight,
            bias: linear.bias,
            in_dim: linear.in_dim,
            out_dim: linear.out_dim,
            mode,
            eps: cfg.eps,
            bias_policy: cfg.bias_policy,
            ste: cfg.ste,
            ln_gain: None,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let eps = T::lit(self.eps);
        let w = tape.param(self.weight);

        let (lhs, row_gamma) = if self.mode.quantizes_activations() {
            let gain = self.ln_gain.map(|g| tape.param(g));
            let xn = tape.layer_norm(x, gain, None, eps)?;
            let t = tape.value(xn);
            let c = t.cols();
            let gammas: Vec<T> = t
                .data()
                .chunks(c.max(1))
                .map(|row| absmax_scale(row, QuantRange::INT8, eps))
                .collect();
            let z = tape.scale_rows(xn, gammas.clone())?;
            (tape.straight_through(z, &QuantRange::INT8, self.ste), Some(gammas))
        } else {
            (x, None)
        };

        let (rhs, beta) = if self.mode.quantizes_weights() {
            let beta = absmean_scale(tape.value(w).data(), eps);
            let z = tape.scale(w, beta);
            (tape.straight_through(z, &QuantRange::TERNARY, self.ste), Some(beta))
        } else {
            (w, None)
        };

        let acc = tape.matmul_nt(lhs, rhs)?;
        let bias = self.bias.map(|b| tape.param(b));
        let with_bias = |tape: &mut Tape<'_, T>, y: Var| -> Result<Var> {
            match bias {
                Some(b) => tape.add_row(y, b),
                None => Ok(y),
            }
        };

        let acc = match self.bias_policy {
            BiasPolicy::Literal => with_bias(tape, acc)?,
            BiasPolicy::PostDequant => acc,
        };
        let y = match (row_gamma, beta) {
            (None, None) => acc,
            (None, Some(beta)) => tape.scale(acc, T::one() / beta),
            (Some(g), beta) => {
                let beta = beta.unwrap_or_else(T::one);
                let inv = g.iter().map(|&gr| T::one() / (beta * gr)).collect();
                tape.scale_rows(acc, inv)?
            }
        };
        match self.bias_policy {
            BiasPolicy::Literal => Ok(y),
            BiasPolicy::PostDequant => with_bias(tape, y),
        }
    }

    /// Frozen ternary codes and `β` of the current weights.
    pub fn ternary_weights<T: Scalar>(&self, store: &ParamStore<T>) -> (QuantCodes, T) {
        let (codes, p) = quantize_weights_ternary(store.get(self.weight), T::lit(self.eps));
        (codes, p.beta)
    }
}

/// A linear position in a layer tree: either untouched or replaced.
#[derive(Debug, Clone, PartialEq)]
pub enum LinearSlot {
    Plain(LinearLayer),
    Bit(BitLinearLayer),
}

impl LinearSlot {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        match self {
            LinearSlot::Plain(l) => l.forward(tape, x),
            LinearSlot::Bit(b) => b.forward(tape, x),
        }
    }

    pub fn weight(&self) -> ParamId {
        match self {
            LinearSlot::Plain(l) => l.weight,
            LinearSlot::Bit(b) => b.weight,
        }
    }

    pub fn bias(&self) -> Option<ParamId> {
        match self {
            LinearSlot::Plain(l) => l.bias,
            LinearSlot::Bit(b) => b.bias,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            LinearSlot::Plain(l) => (l.in_dim, l.out_dim),
            LinearSlot::Bit(b) => (b.in_dim, b.out_dim),
        }
    }

    pub fn mode(&self) -> QuantMode {
        match self {
            LinearSlot::Plain(_) => QuantMode::None,
            LinearSlot::Bit(b) => b.mode,
        }
    }

    /// The underlying plain layer, dropping any quantization settings.
    pub fn to_plain(&self) -> LinearLayer {
        let ((in_dim, out_dim), weight, bias) = (self.dims(), self.weight(), self.bias());
        LinearLayer {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn as_bit(&self) -> Option<&BitLinearLayer> {
        match self {
            LinearSlot::Bit(b) => Some(b),
            LinearSlot::Plain(_) => None,
        }
    }
}
