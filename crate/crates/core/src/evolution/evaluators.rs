use std::sync::RwLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Evaluation, Evaluator};
use crate::biws::Supernet;
use crate::container::Container;
use crate::model::{mlm_pretrain, proxy_evaluate, Corpus, EvalSet, Model, ModelConfig, TrainConfig};
use crate::search_space::{BackboneSpec, PrimitiveOp};

/// Wraps a pure scoring function.
pub struct FnEvaluator<F>(pub F);

impl<F> Evaluator for FnEvaluator<F>
where
    F: Fn(&BackboneSpec) -> f64 + Sync,
{
    type Artifact = ();

    fn evaluate(&self, spec: &BackboneSpec, _seed: u64) -> Result<Evaluation<()>, String> {
        Ok(Evaluation {
            score: (self.0)(spec),
            loss_curve: None,
            artifact: (),
        })
    }
}

/// Noise-free landscapes scoring the fraction of attention nodes (over the
/// whole backbone) that are "good"; a backbone without attention nodes scores 0.
#[derive(Debug, Clone, PartialEq)]
pub enum SyntheticFitness {
    /// A node is good when its op is in the set.
    Ops(Vec<PrimitiveOp>),
    /// A node at path position `j` is good when its op is `targets[j]`.
    Positional(Vec<PrimitiveOp>),
}

impl SyntheticFitness {
    pub fn score(&self, spec: &BackboneSpec) -> f64 {
        let (good, total) = spec.attention_layers().fold((0, 0), |(g, t), (_, dag)| {
            let hits = dag
                .nodes()
                .iter()
                .enumerate()
                .filter(|(j, n)| match self {
                    SyntheticFitness::Ops(set) => set.contains(&n.op),
                    SyntheticFitness::Positional(targets) => targets.get(*j) == Some(&n.op),
                })
                .count();
            (g + hits, t + dag.len())
        });
        if total == 0 {
            0.0
        } else {
            good as f64 / total as f64
        }
    }
}

impl Evaluator for SyntheticFitness {
    type Artifact = ();

    fn evaluate(&self, spec: &BackboneSpec, _seed: u64) -> Result<Evaluation<()>, String> {
        Ok(Evaluation {
            score: self.score(spec),
            loss_curve: None,
            artifact: (),
        })
    }
}

/// Pretrains each candidate on the masked-token task and scores heldout
/// accuracy. With a supernet, candidates start from extracted weights and
/// the best child of each iteration writes its weights back.
pub struct TrainingEvaluator {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: Corpus,
    pub eval_set: EvalSet,
    supernet: Option<RwLock<Supernet>>,
}

impl TrainingEvaluator {
    pub fn new(model: ModelConfig, train: TrainConfig, corpus: Corpus, eval_set: EvalSet, supernet: Option<Supernet>) -> Self {
        Self {
            model,
            train,
            corpus,
            eval_set,
            supernet: supernet.map(RwLock::new),
        }
    }

    pub fn supernet(&self) -> Option<Supernet> {
        self.supernet.as_ref().map(|s| s.read().expect("supernet lock").clone())
    }
}

impl Evaluator for TrainingEvaluator {
    type Artifact = Option<Model>;

    fn evaluate(&self, spec: &BackboneSpec, seed: u64) -> Result<Evaluation<Option<Model>>, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = match &self.supernet {
            Some(net) => {
                let params = net
                    .read()
                    .expect("supernet lock")
                    .init_candidate(spec)
                    .map_err(|e| e.to_string())?;
                Model::from_params(spec, &self.model, params)
            }
            None => Model::random(spec, &self.model, &mut rng),
        }
        .map_err(|e| e.to_string())?;
        let report = mlm_pretrain(&mut model, &self.corpus, &self.train, &mut rng).map_err(|e| e.to_string())?;
        let score = proxy_evaluate(&model, &self.eval_set).map_err(|e| e.to_string())?;
        Ok(Evaluation {
            score,
            loss_curve: Some(report.losses),
            artifact: self.supernet.is_some().then_some(model),
        })
    }

    fn commit(&mut self, _spec: &BackboneSpec, artifact: Option<Model>) -> Result<(), String> {
        match (&self.supernet, artifact) {
            (Some(net), Some(model)) => net
                .write()
                .expect("supernet lock")
                .write_back_candidate(&model)
                .map_err(|e| e.to_string()),
            _ => Ok(()),
        }
    }

    fn save_state(&self) -> Option<Vec<u8>> {
        let net = self.supernet.as_ref()?.read().expect("supernet lock");
        let mut bytes = Vec::new();
        net.to_container().write_to(&mut bytes).expect("in-memory write");
        Some(bytes)
    }

    fn load_state(&mut self, bytes: &[u8]) -> Result<(), String> {
        let c = Container::read_from(bytes).map_err(|e| e.to_string())?;
        let net = Supernet::from_container(&c).map_err(|e| e.to_string())?;
        self.supernet = Some(RwLock::new(net));
        Ok(())
    }
}
