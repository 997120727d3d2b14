//! Temporary replica chains.
//!
//! A chain of `T` modules is appended after the penultimate representation
//! `h_0` of a base network. Module `t` maps `h_{t-1}` to `h_t` and the base
//! network's output head turns every `h_t` into logits `π_t`. Two module
//! kinds exist:
//!
//! - dropout: `h'_t = dropout(h_{t-1}, p_t)`, `h_t = h'_t + W_t h'_t + b_t`
//!   with `W_t`, `b_t` starting at zero;
//! - depth: `h_t = h_{t-1} + Σ blocks`, each block a two-layer residual MLP
//!   whose output layer starts at zero.
//!
//! Either way the chain is an exact identity at initialisation in eval mode.

mod model;

pub use model::{ArchSpec, ChainOutput, SpgModel};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, ParamId, ParamStore, RngStream, Tape, Tensor, Var};
use crate::error::{Result, SpgError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum TrpVariant {
    HpoDropout { rates: Vec<f64> },
    NasDepth { blocks: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrpConfig {
    /// number of replica modules `T`
    pub depth: usize,
    pub variant: TrpVariant,
    /// representation width `D`
    pub width: usize,
    /// output classes `V`
    pub classes: usize,
}

impl TrpConfig {
    pub fn hpo(rates: Vec<f64>, width: usize, classes: usize) -> Result<Self> {
        let cfg = TrpConfig {
            depth: rates.len(),
            variant: TrpVariant::HpoDropout { rates },
            width,
            classes,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn nas(depth: usize, blocks: usize, width: usize, classes: usize) -> Result<Self> {
        let cfg = TrpConfig {
            depth,
            variant: TrpVariant::NasDepth { blocks },
            width,
            classes,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// A chain with no modules; training with it is plain cross-entropy.
    pub fn empty(width: usize, classes: usize) -> Self {
        TrpConfig {
            depth: 0,
            variant: TrpVariant::HpoDropout { rates: Vec::new() },
            width,
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.classes < 2 {
            return Err(SpgError::invalid("replica width must be positive and classes >= 2"));
        }
        match &self.variant {
            TrpVariant::HpoDropout { rates } => {
                if rates.len() != self.depth {
                    return Err(SpgError::invalid(format!(
                        "{} dropout rates given for {} modules",
                        rates.len(),
                        self.depth
                    )));
                }
                if let Some(p) = rates.iter().find(|p| !(0.0..1.0).contains(*p)) {
                    return Err(SpgError::invalid(format!("dropout rate {p} outside [0, 1)")));
                }
            }
            TrpVariant::NasDepth { blocks } => {
                if *blocks == 0 {
                    return Err(SpgError::invalid("depth modules need at least one block"));
                }
            }
        }
        Ok(())
    }

    pub fn rates(&self) -> Option<&[f64]> {
        match &self.variant {
            TrpVariant::HpoDropout { rates } => Some(rates),
            TrpVariant::NasDepth { .. } => None,
        }
    }

    pub fn variant_name(&self) -> &'static str {
        match self.variant {
            TrpVariant::HpoDropout { .. } => "hpo",
            TrpVariant::NasDepth { .. } => "nas",
        }
    }

    pub(crate) fn with_width(&self, width: usize) -> Self {
        TrpConfig { width, ..self.clone() }
    }
}

/// `1 - Π_{k=1..t} (1 - p_k)`: the effective rate at which an element of
/// `h_0` has been zeroed by the time it reaches `h_t`.
pub fn cumulative_rate(cfg: &TrpConfig, t: usize) -> Result<f64> {
    let rates = cfg
        .rates()
        .ok_or_else(|| SpgError::invalid("cumulative rate needs the dropout variant"))?;
    if t == 0 || t > rates.len() {
        return Err(SpgError::OutOfRange {
            what: "replica depth",
            index: t,
            bound: rates.len() + 1,
        });
    }
    // keep fraction updated as k - k p, which lands on 0.36 and 0.488
    // exactly for three rates of 0.2
    let keep = rates[..t].iter().fold(1.0, |k, p| k - k * p);
    Ok(1.0 - keep)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBudget {
    pub base: usize,
    pub temporary: usize,
    pub total: usize,
}

impl ParamBudget {
    pub fn new(base: usize, temporary: usize) -> Self {
        ParamBudget {
            base,
            temporary,
            total: base + temporary,
        }
    }
}

/// Scalars added by one chain of the given configuration (`base` is zero).
pub fn added_param_count(cfg: &TrpConfig) -> ParamBudget {
    let d = cfg.width;
    let per_linear = d * d + d;
    let temporary = match cfg.variant {
        TrpVariant::HpoDropout { .. } => cfg.depth * per_linear,
        TrpVariant::NasDepth { blocks } => cfg.depth * blocks * 2 * per_linear,
    };
    ParamBudget::new(0, temporary)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Zero,
    /// uniform in `±sqrt(6 / fan_in)`, zero bias
    He,
}

/// `y = x W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let mut w = Tensor::zeros(&[fan_in, fan_out]);
        if init == Init::He {
            let bound = (6.0 / fan_in as f64).sqrt();
            for x in w.data_mut() {
                *x = rng.uniform(-bound, bound);
            }
        }
        let weight = store.add(format!("{name}.weight"), w)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?;
        Ok(Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight)?;
        let b = tape.param(store, self.bias)?;
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    pub fn param_count(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrpModule {
    Dropout { rate: f64, linear: Linear },
    Depth { blocks: Vec<(Linear, Linear)> },
}

impl TrpModule {
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        rng: &mut RngStream,
        mode: Mode,
    ) -> Result<Var> {
        match self {
            TrpModule::Dropout { rate, linear } => {
                let dropped = tape.dropout(h, *rate, rng, mode)?;
                let delta = linear.forward(tape, store, dropped)?;
                tape.add(dropped, delta)
            }
            TrpModule::Depth { blocks } => {
                let mut x = h;
                for (fc1, fc2) in blocks {
                    let inner = fc1.forward(tape, store, x)?;
                    let inner = tape.relu(inner)?;
                    let delta = fc2.forward(tape, store, inner)?;
                    x = tape.add(x, delta)?;
                }
                Ok(x)
            }
        }
    }

    /// Every linear map inside the module, in registration order.
    pub fn linears(&self) -> Vec<&Linear> {
        match self {
            TrpModule::Dropout { linear, .. } => vec![linear],
            TrpModule::Depth { blocks } => blocks.iter().flat_map(|(a, b)| [a, b]).collect(),
        }
    }
}

/// The replica modules attached to one output stream.
#[derive(Clone, Debug, PartialEq)]
pub struct TrpChain {
    pub config: TrpConfig,
    pub modules: Vec<TrpModule>,
}

impl TrpChain {
    /// Append a fresh chain's parameters to `store` under `prefix`.
    pub fn build(store: &mut ParamStore, prefix: &str, config: TrpConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let mut modules = Vec::with_capacity(config.depth);
        for t in 1..=config.depth {
            let module = match &config.variant {
                TrpVariant::HpoDropout { rates } => TrpModule::Dropout {
                    rate: rates[t - 1],
                    linear: Linear::new(store, &format!("{prefix}.{t}.linear"), d, d, Init::Zero, rng)?,
                },
                TrpVariant::NasDepth { blocks } => TrpModule::Depth {
                    blocks: (0..*blocks)
                        .map(|b| {
                            let fc1 = Linear::new(store, &format!("{prefix}.{t}.block{b}.fc1"), d, d, Init::He, rng)?;
                            let fc2 = Linear::new(store, &format!("{prefix}.{t}.block{b}.fc2"), d, d, Init::Zero, rng)?;
                            Ok((fc1, fc2))
                        })
                        .collect::<Result<_>>()?,
                },
            };
            modules.push(module);
        }
        Ok(TrpChain { config, modules })
    }

    pub fn param_count(&self) -> usize {
        self.modules
            .iter()
            .flat_map(TrpModule::linears)
            .map(Linear::param_count)
            .sum()
    }
}

/// Run `h_0` through the chain and the shared head, returning `h_1..h_T` and
/// `π_0..π_T`.
pub fn forward_chain(
    tape: &mut Tape,
    store: &ParamStore,
    h0: Var,
    chain: &TrpChain,
    head: &Linear,
    rng: &mut RngStream,
    mode: Mode,
) -> Result<ChainOutput> {
    let shape = tape.shape(h0);
    if shape.len() != 2 || shape[1] != chain.config.width {
        return Err(SpgError::Shape {
            op: "forward_chain",
            lhs: vec![chain.config.width],
            rhs: shape.to_vec(),
        });
    }
    let mut reprs = Vec::with_capacity(chain.modules.len());
    let mut logits = vec![head.forward(tape, store, h0)?];
    let mut h = h0;
    for module in &chain.modules {
        h = module.forward(tape, store, h, rng, mode)?;
        reprs.push(h);
        logits.push(head.forward(tape, store, h)?);
    }
    Ok(ChainOutput { reprs, logits })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cumulative_rates() {
        let cfg = TrpConfig::hpo(vec![0.2, 0.2, 0.2], 4, 3).unwrap();
        assert!((cumulative_rate(&cfg, 1).unwrap() - 0.2).abs() < 1e-16);
        assert_eq!(cumulative_rate(&cfg, 2).unwrap(), 0.36);
        assert_eq!(cumulative_rate(&cfg, 3).unwrap(), 0.488);
        assert!(cumulative_rate(&cfg, 0).is_err());
        assert!(cumulative_rate(&cfg, 4).is_err());
    }

    #[test]
    fn budgets() {
        let big = TrpConfig::hpo(vec![0.2; 3], 768, 1000).unwrap();
        assert_eq!(added_param_count(&big).temporary, 1_771_776);
        let small = TrpConfig::hpo(vec![0.1, 0.1], 4, 3).unwrap();
        assert_eq!(added_param_count(&small).temporary, 40);
        assert_eq!(added_param_count(&TrpConfig::empty(4, 3)).temporary, 0);
        let nas = TrpConfig::nas(3, 2, 4, 3).unwrap();
        assert_eq!(added_param_count(&nas).temporary, 3 * 2 * 2 * 20);
    }

    #[test]
    fn config_errors() {
        assert!(TrpConfig::hpo(vec![1.0], 4, 3).is_err());
        assert!(TrpConfig::hpo(vec![-0.1], 4, 3).is_err());
        assert!(TrpConfig::nas(2, 0, 4, 3).is_err());
    }

    #[test]
    fn counted_params_match_budget() {
        for cfg in [
            TrpConfig::hpo(vec![0.2, 0.3], 6, 3).unwrap(),
            TrpConfig::nas(3, 2, 5, 4).unwrap(),
        ] {
            let mut store = ParamStore::new();
            let mut rng = RngStream::new(0, 9);
            let chain = TrpChain::build(&mut store, "trp", cfg.clone(), &mut rng).unwrap();
            assert_eq!(chain.param_count(), added_param_count(&cfg).temporary);
            assert_eq!(store.scalar_count(), chain.param_count());
        }
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(0, 9);
        let chain = TrpChain::build(&mut store, "trp", TrpConfig::hpo(vec![0.2], 4, 3).unwrap(), &mut rng).unwrap();
        let head = Linear::new(&mut store, "head", 5, 3, Init::He, &mut rng).unwrap();
        let mut tape = Tape::new();
        let h0 = tape.constant(Tensor::zeros(&[2, 5])).unwrap();
        assert!(forward_chain(&mut tape, &store, h0, &chain, &head, &mut rng, Mode::Eval).is_err());
    }
}
