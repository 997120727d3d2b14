use serde::{Deserialize, Serialize};

use super::{added_param_count, forward_chain, Init, Linear, ParamBudget, TrpChain, TrpConfig};
use crate::autodiff::{streams, Mode, ParamId, ParamStore, RngStream, Tape, Tensor, Var};
use crate::error::{Result, SpgError};
use crate::tasks::{BatchInput, TaskKind};

/// Shape of a reference network: an optional token embedding, a ReLU MLP
/// trunk and a linear head. Segmentation networks carry a second head read
/// from the trunk layer `aux_from`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub kind: TaskKind,
    /// features per unit, or tokens per window for language modelling
    pub input_dim: usize,
    pub vocab: usize,
    pub embed_dim: usize,
    /// trunk widths; the last one is the representation width `D`
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub aux_from: Option<usize>,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.is_empty() || self.hidden.contains(&0) || self.classes < 2 {
            return Err(SpgError::invalid("architecture needs input, at least one hidden layer and 2+ classes"));
        }
        if self.kind == TaskKind::LanguageModeling && (self.vocab < 2 || self.embed_dim == 0) {
            return Err(SpgError::invalid("language model needs a vocabulary and embedding width"));
        }
        match (self.kind, self.aux_from) {
            (TaskKind::Segmentation, Some(i)) if i < self.hidden.len() => Ok(()),
            (TaskKind::Segmentation, _) => Err(SpgError::invalid("segmentation needs an auxiliary head source layer")),
            (_, Some(_)) => Err(SpgError::invalid("only segmentation networks carry an auxiliary head")),
            _ => Ok(()),
        }
    }

    /// `D`, the width feeding the main head.
    pub fn width(&self) -> usize {
        *self.hidden.last().expect("validated")
    }

    /// Widths of the representations feeding each output head.
    pub fn stream_widths(&self) -> Vec<usize> {
        let mut w = vec![self.width()];
        if let Some(i) = self.aux_from {
            w.push(self.hidden[i]);
        }
        w
    }
}

/// Per-stream result of a forward pass.
#[derive(Clone, Debug)]
pub struct ChainOutput {
    /// `h_1..h_T`
    pub reprs: Vec<Var>,
    /// `π_0..π_T`
    pub logits: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpgModel {
    arch: ArchSpec,
    store: ParamStore,
    embedding: Option<ParamId>,
    trunk: Vec<Linear>,
    heads: Vec<Linear>,
    base_len: usize,
    trp: Option<TrpConfig>,
    chains: Vec<TrpChain>,
}

const STREAM_NAMES: [&str; 2] = ["main", "aux"];

impl SpgModel {
    pub fn new(arch: ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = RngStream::new(seed, streams::INIT);
        let mut store = ParamStore::new();
        let mut width = arch.input_dim;
        let embedding = if arch.kind == TaskKind::LanguageModeling {
            let mut table = Tensor::zeros(&[arch.vocab, arch.embed_dim]);
            for x in table.data_mut() {
                *x = rng.normal();
            }
            width = arch.input_dim * arch.embed_dim;
            Some(store.add("embed.table", table)?)
        } else {
            None
        };
        let mut trunk = Vec::with_capacity(arch.hidden.len());
        for (i, &h) in arch.hidden.iter().enumerate() {
            trunk.push(Linear::new(&mut store, &format!("trunk.{i}"), width, h, Init::He, &mut rng)?);
            width = h;
        }
        let mut heads = Vec::new();
        for (s, w) in arch.stream_widths().into_iter().enumerate() {
            let name = if s == 0 { "head" } else { "aux_head" };
            heads.push(Linear::new(&mut store, name, w, arch.classes, Init::He, &mut rng)?);
        }
        let base_len = store.len();
        Ok(SpgModel {
            arch,
            store,
            embedding,
            trunk,
            heads,
            base_len,
            trp: None,
            chains: Vec::new(),
        })
    }

    /// Rebuild a model around previously saved parameters. Names and shapes
    /// must match the layout implied by `arch` and `trp` exactly.
    pub fn with_params(arch: ArchSpec, trp: Option<TrpConfig>, params: ParamStore) -> Result<Self> {
        let mut model = SpgModel::new(arch, 0)?;
        if let Some(cfg) = trp {
            model.attach(cfg, 0)?;
        }
        if params.len() != model.store.len() {
            return Err(SpgError::Format(format!(
                "expected {} parameter tensors, found {}",
                model.store.len(),
                params.len()
            )));
        }
        for ((want, have), (got, t)) in model.store.iter().zip(params.iter()) {
            if want != got || have.shape() != t.shape() {
                return Err(SpgError::Format(format!(
                    "parameter {got} {:?} does not match expected {want} {:?}",
                    t.shape(),
                    have.shape()
                )));
            }
        }
        model.store = params;
        Ok(model)
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn trp(&self) -> Option<&TrpConfig> {
        self.trp.as_ref()
    }

    pub fn chains(&self) -> &[TrpChain] {
        &self.chains
    }

    pub fn is_attached(&self) -> bool {
        self.trp.is_some()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// The output heads: the main head first, then the auxiliary one if any.
    pub fn heads(&self) -> &[Linear] {
        &self.heads
    }

    pub fn stream_count(&self) -> usize {
        self.heads.len()
    }

    pub fn base_param_count(&self) -> usize {
        self.store
            .ids()
            .take(self.base_len)
            .map(|id| self.store.get(id).len())
            .sum()
    }

    pub fn budget(&self) -> ParamBudget {
        let temporary = self.chains.iter().map(TrpChain::param_count).sum();
        ParamBudget::new(self.base_param_count(), temporary)
    }

    /// Budget a configuration would add, one chain per output stream.
    pub fn planned_budget(&self, cfg: &TrpConfig) -> ParamBudget {
        let temporary = self
            .arch
            .stream_widths()
            .into_iter()
            .map(|w| added_param_count(&cfg.with_width(w)).temporary)
            .sum();
        ParamBudget::new(self.base_param_count(), temporary)
    }

    /// Append one replica chain per output stream.
    pub fn attach(&mut self, cfg: TrpConfig, seed: u64) -> Result<()> {
        if self.trp.is_some() {
            return Err(SpgError::invalid("a replica chain is already attached"));
        }
        cfg.validate()?;
        if cfg.width != self.arch.width() || cfg.classes != self.arch.classes {
            return Err(SpgError::invalid(format!(
                "chain expects D={} V={}, network has D={} V={}",
                cfg.width,
                cfg.classes,
                self.arch.width(),
                self.arch.classes
            )));
        }
        let mut rng = RngStream::new(seed, streams::INIT + 0x10);
        for (s, w) in self.arch.stream_widths().into_iter().enumerate() {
            let prefix = format!("trp.{}", STREAM_NAMES[s]);
            let chain = TrpChain::build(&mut self.store, &prefix, cfg.with_width(w), &mut rng)?;
            self.chains.push(chain);
        }
        self.trp = Some(cfg);
        Ok(())
    }

    /// The base network alone, with the chain's parameters dropped.
    pub fn strip(&self) -> Result<SpgModel> {
        if self.trp.is_none() {
            return Err(SpgError::NotAttached);
        }
        let mut out = self.clone();
        out.store.truncate(self.base_len);
        out.trp = None;
        out.chains.clear();
        Ok(out)
    }

    /// Penultimate representations feeding each head.
    fn trunk(&self, tape: &mut Tape, input: &BatchInput) -> Result<Vec<Var>> {
        let mut x = match (input, self.embedding) {
            (BatchInput::Dense(t), None) => {
                if t.rank() != 2 || t.shape()[1] != self.arch.input_dim {
                    return Err(SpgError::Shape {
                        op: "model_input",
                        lhs: vec![self.arch.input_dim],
                        rhs: t.shape().to_vec(),
                    });
                }
                tape.constant(t.clone())?
            }
            (BatchInput::Tokens { indices, window }, Some(table)) => {
                if *window != self.arch.input_dim {
                    return Err(SpgError::Shape {
                        op: "model_input",
                        lhs: vec![self.arch.input_dim],
                        rhs: vec![*window],
                    });
                }
                let table = tape.param(&self.store, table)?;
                tape.embedding(table, indices, *window)?
            }
            _ => return Err(SpgError::invalid("input kind does not match the network")),
        };
        let mut aux = None;
        for (i, layer) in self.trunk.iter().enumerate() {
            x = layer.forward(tape, &self.store, x)?;
            x = tape.relu(x)?;
            if self.arch.aux_from == Some(i) {
                aux = Some(x);
            }
        }
        Ok(std::iter::once(x).chain(aux).collect())
    }

    /// Logits at every depth, per output stream. Without a chain each stream
    /// carries only `π_0`.
    pub fn forward(&self, tape: &mut Tape, input: &BatchInput, rng: &mut RngStream, mode: Mode) -> Result<Vec<ChainOutput>> {
        let reps = self.trunk(tape, input)?;
        reps.into_iter()
            .enumerate()
            .map(|(s, h0)| match self.chains.get(s) {
                Some(chain) => forward_chain(tape, &self.store, h0, chain, &self.heads[s], rng, mode),
                None => Ok(ChainOutput {
                    reprs: Vec::new(),
                    logits: vec![self.heads[s].forward(tape, &self.store, h0)?],
                }),
            })
            .collect()
    }

    /// Eval-mode logits `[stream][depth]`.
    pub fn logits(&self, input: &BatchInput) -> Result<Vec<Vec<Tensor>>> {
        let mut tape = Tape::new();
        let mut rng = RngStream::new(0, streams::DROPOUT);
        let out = self.forward(&mut tape, input, &mut rng, Mode::Eval)?;
        Ok(out
            .iter()
            .map(|o| o.logits.iter().map(|&v| tape.value(v).clone()).collect())
            .collect())
    }

    /// Eval-mode `π_0` of the main stream.
    pub fn predict(&self, input: &BatchInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let reps = self.trunk(&mut tape, input)?;
        let logits = self.heads[0].forward(&mut tape, &self.store, reps[0])?;
        Ok(tape.value(logits).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{Split, TaskSpec};

    fn blobs_model() -> (SpgModel, BatchInput) {
        let spec = TaskSpec::blobs_preset(1);
        let data = spec.generate(Split::Val).unwrap();
        let model = SpgModel::new(spec.reference_arch(), 3).unwrap();
        (model, data.batch(&(0..20).collect::<Vec<_>>()).unwrap().input)
    }

    #[test]
    fn init_identity_both_variants() {
        for cfg in [
            TrpConfig::hpo(vec![0.2, 0.2, 0.2], 32, 3).unwrap(),
            TrpConfig::nas(3, 2, 32, 3).unwrap(),
        ] {
            let (mut model, input) = blobs_model();
            model.attach(cfg, 5).unwrap();
            let logits = model.logits(&input).unwrap();
            for t in 1..=3 {
                assert!(logits[0][t].bit_eq(&logits[0][0]));
            }
        }
    }

    #[test]
    fn strip_restores_base() {
        let (mut model, input) = blobs_model();
        let base = model.base_param_count();
        let before = model.predict(&input).unwrap();
        model.attach(TrpConfig::hpo(vec![0.2; 3], 32, 3).unwrap(), 0).unwrap();
        assert_eq!(model.budget().temporary, 3 * (32 * 32 + 32));
        assert_eq!(model.budget().base, base);
        let stripped = model.strip().unwrap();
        assert_eq!(stripped.store().scalar_count(), base);
        assert!(stripped.predict(&input).unwrap().bit_eq(&before));
        assert!(matches!(stripped.strip(), Err(SpgError::NotAttached)));
    }

    #[test]
    fn segmentation_gets_two_chains() {
        let spec = TaskSpec::shapes_preset(0);
        let mut model = SpgModel::new(spec.reference_arch(), 0).unwrap();
        let cfg = TrpConfig::hpo(vec![0.2; 2], 24, 3).unwrap();
        let planned = model.planned_budget(&cfg);
        model.attach(cfg, 0).unwrap();
        assert_eq!(model.chains().len(), 2);
        assert_eq!(model.budget(), planned);
        assert_eq!(planned.temporary, 2 * 2 * (24 * 24 + 24));
    }

    #[test]
    fn attach_checks_widths() {
        let (mut model, _) = blobs_model();
        assert!(model.attach(TrpConfig::hpo(vec![0.2], 16, 3).unwrap(), 0).is_err());
        assert!(model.attach(TrpConfig::hpo(vec![0.2], 32, 4).unwrap(), 0).is_err());
        model.attach(TrpConfig::hpo(vec![0.2], 32, 3).unwrap(), 0).unwrap();
        assert!(model.attach(TrpConfig::hpo(vec![0.2], 32, 3).unwrap(), 0).is_err());
    }

    #[test]
    fn saved_params_reload() {
        let (mut model, input) = blobs_model();
        model.attach(TrpConfig::nas(2, 1, 32, 3).unwrap(), 4).unwrap();
        let back = SpgModel::with_params(model.arch().clone(), model.trp().cloned(), model.store().clone()).unwrap();
        assert_eq!(back, model);
        assert!(back.predict(&input).unwrap().bit_eq(&model.predict(&input).unwrap()));
        let mut bad = model.store().clone();
        bad.truncate(3);
        assert!(SpgModel::with_params(model.arch().clone(), model.trp().cloned(), bad).is_err());
    }
}
