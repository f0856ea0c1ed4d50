use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, Model, ModelError, Result, MASK_TOKEN};
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub mask_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 16,
            lr: 1e-3,
            warmup_steps: 60,
            mask_prob: 0.15,
        }
    }
}

impl TrainConfig {
    /// Linear warmup to `lr`, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Training loss of each step, measured before that step's update.
    pub losses: Vec<f64>,
}

/// A batch of corrupted inputs with flat per-position targets.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

/// Selects each position with probability `mask_prob` (at least one per
/// sequence); selected positions become the mask token 80% of the time,
/// a random token 10% and stay unchanged 10%.
pub fn mask_batch<R: Rng + ?Sized>(seqs: &[Vec<usize>], vocab: usize, mask_prob: f64, rng: &mut R) -> MaskedBatch {
    let mut out = MaskedBatch {
        inputs: Vec::with_capacity(seqs.len()),
        targets: Vec::new(),
        mask: Vec::new(),
    };
    let corrupt = |t: usize, rng: &mut R| {
        let r: f64 = rng.random();
        if r < 0.8 {
            MASK_TOKEN
        } else if r < 0.9 {
            rng.random_range(1..vocab)
        } else {
            t
        }
    };
    for seq in seqs {
        let mut chosen: Vec<bool> = (0..seq.len()).map(|_| rng.random_bool(mask_prob)).collect();
        if !chosen.contains(&true) {
            chosen[rng.random_range(0..seq.len())] = true;
        }
        let input = seq
            .iter()
            .zip(&chosen)
            .map(|(&t, &m)| if m { corrupt(t, rng) } else { t })
            .collect();
        out.inputs.push(input);
        out.targets.extend_from_slice(seq);
        out.mask.extend_from_slice(&chosen);
    }
    out
}

fn map_non_finite(step: usize) -> impl Fn(ModelError) -> ModelError {
    move |e| match e {
        ModelError::Tensor(TensorError::NonFinite { .. }) => ModelError::NonFiniteLoss { step },
        other => other,
    }
}

/// Adam pretraining on the masked-token objective over random training batches.
pub fn mlm_pretrain<R: Rng + ?Sized>(model: &mut Model, corpus: &Corpus, cfg: &TrainConfig, rng: &mut R) -> Result<TrainReport> {
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(ModelError::Config("steps and batch_size must be positive".into()));
    }
    if corpus.train.is_empty() {
        return Err(ModelError::Input("empty training split".into()));
    }
    let adam = AdamConfig::default();
    let mut state = AdamState::new(&model.params);
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let seqs: Vec<Vec<usize>> = (0..cfg.batch_size)
            .map(|_| corpus.train[rng.random_range(0..corpus.train.len())].clone())
            .collect();
        let batch = mask_batch(&seqs, corpus.vocab, cfg.mask_prob, rng);
        let mut tape = Tape::new();
        let grads = (|| -> Result<(f64, _)> {
            let fwd = model.forward(&mut tape, &batch.inputs)?;
            let loss = tape.masked_cross_entropy(fwd.logits, &batch.targets, &batch.mask)?;
            Ok((tape.value(loss).item(), tape.backward(loss)?))
        })()
        .map_err(map_non_finite(step))?;
        let (loss, grads) = grads;
        report.losses.push(loss);
        model.params.zero_grad();
        grads.accumulate_into(&mut model.params);
        adam_step(&mut model.params, &mut state, &adam, cfg.lr_at(step));
        if model.params.iter().any(|p| !p.value.is_finite()) {
            return Err(ModelError::NonFiniteLoss { step });
        }
    }
    Ok(report)
}

/// Heldout sequences with a fixed set of fully masked positions.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
}

impl EvalSet {
    pub fn num_masked(&self) -> usize {
        self.mask.iter().flatten().filter(|&&m| m).count()
    }
}

/// Every selected position is replaced by the mask token so the score only
/// measures prediction from context.
pub fn make_eval_set(corpus: &Corpus, mask_prob: f64, seed: u64) -> EvalSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = EvalSet {
        inputs: Vec::new(),
        targets: Vec::new(),
        mask: Vec::new(),
    };
    for seq in &corpus.heldout {
        let mut chosen: Vec<bool> = (0..seq.len()).map(|_| rng.random_bool(mask_prob)).collect();
        if !chosen.contains(&true) {
            chosen[rng.random_range(0..seq.len())] = true;
        }
        set.inputs
            .push(seq.iter().zip(&chosen).map(|(&t, &m)| if m { MASK_TOKEN } else { t }).collect());
        set.targets.push(seq.clone());
        set.mask.push(chosen);
    }
    set
}

const EVAL_CHUNK: usize = 16;

/// Masked-token accuracy; the mask token itself is never predicted.
pub fn proxy_evaluate(model: &Model, eval: &EvalSet) -> Result<f64> {
    let total = eval.num_masked();
    if total == 0 {
        return Err(ModelError::Input("evaluation set has no masked positions".into()));
    }
    let vocab = model.config().vocab;
    let mut correct = 0usize;
    for start in (0..eval.inputs.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(eval.inputs.len());
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &eval.inputs[start..end])?;
        let logits = tape.value(fwd.logits);
        let n = model.config().seq_len;
        for (s, idx) in (start..end).enumerate() {
            for pos in (0..n).filter(|&p| eval.mask[idx][p]) {
                let row = logits.row(s * n + pos);
                let mut best = usize::MAX;
                for t in 0..vocab {
                    if t != MASK_TOKEN && (best == usize::MAX || row[t] > row[best]) {
                        best = t;
                    }
                }
                if best == eval.targets[idx][pos] {
                    correct += 1;
                }
            }
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Final-layer representation of each sequence, `n×d` apiece.
pub fn encode(model: &Model, seqs: &[Vec<usize>]) -> Result<Vec<Tensor>> {
    let n = model.config().seq_len;
    let d = model.config().d_model;
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, chunk)?;
        let hidden = tape.value(fwd.hidden).data();
        for s in 0..chunk.len() {
            out.push(Tensor::new(vec![n, d], hidden[s * n * d..(s + 1) * n * d].to_vec())?);
        }
    }
    Ok(out)
}
