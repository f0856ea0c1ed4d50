use std::cmp::Ordering;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EvolutionError, Result, UcbStats};
use crate::search_space::{
    mutate_inter, mutate_intra, random_backbone, BackboneSpec, KernelDistributions, LayerSpec, OpDistributions,
    MAX_PATH_LEN,
};

pub const HISTORY_FILE: &str = "history.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const EVALUATOR_FILE: &str = "evaluator.bin";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    /// UCB-guided operation-priority mutation.
    Op,
    /// Uniform mutation.
    Ea,
    /// Independent random backbones.
    Rs,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Op => "op",
            Algorithm::Ea => "ea",
            Algorithm::Rs => "rs",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [Algorithm::Op, Algorithm::Ea, Algorithm::Rs].into_iter().find(|a| a.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub population_size: usize,
    /// Parents drawn from the top of the population each iteration.
    pub k: usize,
    pub children_per_parent: usize,
    pub alpha: f64,
    pub max_iterations: usize,
    /// Stop after this many iterations without a strictly better best score.
    pub patience: Option<usize>,
    /// Cap on the number of evaluated candidates.
    pub max_evaluations: Option<usize>,
    pub num_layers: usize,
    pub max_path_len: usize,
    pub seed: u64,
    /// Fill `wall_ms` in history records (breaks byte-identical reruns).
    pub record_wall_time: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            population_size: 20,
            k: 5,
            children_per_parent: 2,
            alpha: 0.5,
            max_iterations: 20,
            patience: Some(10),
            max_evaluations: None,
            num_layers: 12,
            max_path_len: MAX_PATH_LEN,
            seed: 0,
            record_wall_time: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EvolutionError::Config(m.into()));
        if self.k == 0 || self.population_size < self.k {
            return bad("need population_size >= k >= 1");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be finite and non-negative");
        }
        if self.children_per_parent == 0 {
            return bad("children_per_parent must be positive");
        }
        if self.num_layers == 0 || self.max_path_len == 0 {
            return bad("num_layers and max_path_len must be positive");
        }
        if self.max_evaluations == Some(0) {
            return bad("max_evaluations must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: u64,
    pub parent_id: Option<u64>,
    pub spec: BackboneSpec,
    pub score: f64,
}

/// One line of the search history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub id: u64,
    pub parent_id: Option<u64>,
    pub spec: BackboneSpec,
    pub score: f64,
    pub iteration: usize,
    pub wall_ms: Option<u64>,
    pub algorithm: Algorithm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_curve: Option<Vec<f64>>,
}

pub struct Evaluation<A> {
    pub score: f64,
    pub loss_curve: Option<Vec<f64>>,
    /// Handed to [`Evaluator::commit`] if this candidate is the best of its iteration.
    pub artifact: A,
}

/// Scores candidates. `evaluate` may run concurrently for the children of one
/// iteration; everything else runs serially between iterations.
pub trait Evaluator: Sync {
    type Artifact: Send;

    fn evaluate(&self, spec: &BackboneSpec, seed: u64) -> std::result::Result<Evaluation<Self::Artifact>, String>;

    fn commit(&mut self, _spec: &BackboneSpec, _artifact: Self::Artifact) -> std::result::Result<(), String> {
        Ok(())
    }

    fn save_state(&self) -> Option<Vec<u8>> {
        None
    }

    fn load_state(&mut self, _bytes: &[u8]) -> std::result::Result<(), String> {
        Ok(())
    }
}

/// Seed handed to the evaluator for candidate `id`.
pub fn candidate_seed(seed: u64, id: u64) -> u64 {
    let mut z = seed ^ id.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.score.total_cmp(&a.score).then(a.id.cmp(&b.id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    /// Index of the next iteration; the initial population is iteration 0.
    pub iteration: usize,
    pub next_id: u64,
    pub evaluations: usize,
    /// Sorted by score descending, then id ascending.
    pub population: Vec<Candidate>,
    pub stats: UcbStats,
    pub rng: ChaCha8Rng,
    pub best: Option<f64>,
    pub stall: usize,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: SearchConfig,
    pub algorithm: Algorithm,
    pub state: SearchState,
    /// Records in the history file that this state accounts for.
    pub history_len: usize,
}

struct Pending {
    id: u64,
    parent_id: Option<u64>,
    spec: BackboneSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Search {
    config: SearchConfig,
    algorithm: Algorithm,
    state: SearchState,
    history_len: usize,
}

impl Search {
    pub fn new(config: SearchConfig, algorithm: Algorithm) -> Result<Self> {
        config.validate()?;
        let state = SearchState {
            iteration: 0,
            next_id: 0,
            evaluations: 0,
            population: Vec::new(),
            stats: UcbStats::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            best: None,
            stall: 0,
            finished: false,
        };
        Ok(Self {
            config,
            algorithm,
            state,
            history_len: 0,
        })
    }

    pub fn config(&self) -> &SearchConfig {
        &self.config
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algorithm
    }

    pub fn state(&self) -> &SearchState {
        &self.state
    }

    pub fn is_finished(&self) -> bool {
        self.state.finished
    }

    pub fn population(&self) -> &[Candidate] {
        &self.state.population
    }

    pub fn stats(&self) -> &UcbStats {
        &self.state.stats
    }

    pub fn best(&self) -> Option<&Candidate> {
        self.state.population.first()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            algorithm: self.algorithm,
            state: self.state.clone(),
            history_len: self.history_len,
        }
    }

    pub fn from_checkpoint(cp: Checkpoint) -> Result<Self> {
        if cp.version != CHECKPOINT_VERSION {
            return Err(EvolutionError::Checkpoint(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                cp.version
            )));
        }
        cp.config.validate()?;
        Ok(Self {
            config: cp.config,
            algorithm: cp.algorithm,
            state: cp.state,
            history_len: cp.history_len,
        })
    }

    fn budget_left(&self) -> usize {
        self.config
            .max_evaluations
            .map_or(usize::MAX, |b| b.saturating_sub(self.state.evaluations))
    }

    fn fresh_id(&mut self) -> u64 {
        let id = self.state.next_id;
        self.state.next_id += 1;
        id
    }

    fn random_candidates(&mut self, count: usize) -> Vec<Pending> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            match random_backbone(&mut self.state.rng, self.config.num_layers, self.config.max_path_len) {
                Ok(spec) => out.push(Pending {
                    id: self.fresh_id(),
                    parent_id: None,
                    spec,
                }),
                Err(e) => warn!("random backbone generation failed: {e}"),
            }
        }
        out
    }

    fn mutated_child(&mut self, parent: &BackboneSpec, ops: &OpDistributions, kernels: &KernelDistributions) -> Result<BackboneSpec> {
        let rng = &mut self.state.rng;
        let max_len = self.config.max_path_len;
        let mut child = mutate_inter(parent, kernels, max_len, rng)?;
        let attention: Vec<usize> = child.attention_layers().map(|(l, _)| l).collect();
        if !attention.is_empty() {
            let l = attention[rng.random_range(0..attention.len())];
            let dag = child.layers[l].dag().expect("attention layer");
            let (mutated, _) = mutate_intra(dag, ops, max_len, rng);
            child.layers[l] = LayerSpec::Attention(mutated);
        }
        Ok(child)
    }

    fn next_candidates(&mut self) -> Vec<Pending> {
        let budget = self.budget_left();
        if self.state.iteration == 0 {
            return self.random_candidates(self.config.population_size.min(budget));
        }
        let batch = (self.config.k * self.config.children_per_parent).min(budget);
        if self.algorithm == Algorithm::Rs {
            return self.random_candidates(batch);
        }
        let (ops, kernels) = match self.algorithm {
            Algorithm::Op => (
                self.state.stats.op_distributions(self.config.alpha),
                self.state.stats.kernel_distributions(self.config.alpha),
            ),
            _ => (OpDistributions::uniform(), KernelDistributions::uniform()),
        };
        let parents: Vec<(u64, BackboneSpec)> = self
            .state
            .population
            .iter()
            .take(self.config.k)
            .map(|c| (c.id, c.spec.clone()))
            .collect();
        let mut out = Vec::with_capacity(batch);
        'parents: for (pid, spec) in parents {
            for _ in 0..self.config.children_per_parent {
                if out.len() >= batch {
                    break 'parents;
                }
                match self.mutated_child(&spec, &ops, &kernels) {
                    Ok(child) => out.push(Pending {
                        id: self.fresh_id(),
                        parent_id: Some(pid),
                        spec: child,
                    }),
                    Err(e) => warn!("mutation of candidate {pid} failed: {e}"),
                }
            }
        }
        out
    }

    /// Runs one iteration (the first builds the initial population) and
    /// returns the records of every successfully evaluated candidate in id order.
    pub fn step<E: Evaluator>(&mut self, evaluator: &mut E, jobs: usize) -> Result<Vec<HistoryRecord>> {
        if self.state.finished {
            return Ok(Vec::new());
        }
        let pending = self.next_candidates();
        let seed = self.config.seed;
        let timed = self.config.record_wall_time;
        let shared: &E = evaluator;
        let run = |p: &Pending| {
            let start = Instant::now();
            let out = shared.evaluate(&p.spec, candidate_seed(seed, p.id));
            let ms = timed.then(|| start.elapsed().as_millis() as u64);
            (out, ms)
        };
        let results: Vec<_> = if jobs > 1 && pending.len() > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build()
                .map_err(|e| EvolutionError::Evaluator(e.to_string()))?;
            pool.install(|| pending.par_iter().map(run).collect())
        } else {
            pending.iter().map(run).collect()
        };

        let mut records = Vec::new();
        let mut children = Vec::new();
        let mut artifacts = Vec::new();
        for (p, (result, wall_ms)) in pending.into_iter().zip(results) {
            let ev = match result {
                Ok(ev) if (0.0..=1.0).contains(&ev.score) => ev,
                Ok(ev) => {
                    warn!("candidate {} discarded: score {} outside [0, 1]", p.id, ev.score);
                    continue;
                }
                Err(reason) => {
                    warn!("candidate {} discarded: {reason}", p.id);
                    continue;
                }
            };
            self.state.stats.record_result(&p.spec, ev.score)?;
            self.state.evaluations += 1;
            records.push(HistoryRecord {
                id: p.id,
                parent_id: p.parent_id,
                spec: p.spec.clone(),
                score: ev.score,
                iteration: self.state.iteration,
                wall_ms,
                algorithm: self.algorithm,
                loss_curve: ev.loss_curve,
            });
            children.push(Candidate {
                id: p.id,
                parent_id: p.parent_id,
                spec: p.spec,
                score: ev.score,
            });
            artifacts.push(Some(ev.artifact));
        }

        if let Some(best) = (0..children.len()).min_by(|&a, &b| rank(&children[a], &children[b])) {
            let artifact = artifacts[best].take().expect("artifact taken once");
            evaluator
                .commit(&children[best].spec, artifact)
                .map_err(EvolutionError::Evaluator)?;
        }

        self.state.population.extend(children);
        self.state.population.sort_by(rank);
        self.state.population.truncate(self.config.population_size);
        if self.state.population.is_empty() {
            return Err(EvolutionError::EmptyPopulation);
        }

        let top = self.state.population[0].score;
        match self.state.best {
            Some(b) if top <= b => self.state.stall += 1,
            _ => {
                self.state.best = Some(top);
                self.state.stall = 0;
            }
        }
        let done_iterations = self.state.iteration;
        self.state.iteration += 1;
        self.history_len += records.len();
        self.state.finished = done_iterations >= self.config.max_iterations
            || self.config.patience.is_some_and(|p| self.state.stall >= p)
            || self.budget_left() == 0;
        info!(
            "{} iteration {}: {} evaluated, best {:.4}",
            self.algorithm.name(),
            done_iterations,
            records.len(),
            top
        );
        Ok(records)
    }

    /// Steps until finished, passing every record to `sink`.
    pub fn run<E: Evaluator>(
        &mut self,
        evaluator: &mut E,
        jobs: usize,
        mut sink: impl FnMut(&HistoryRecord),
    ) -> Result<()> {
        while !self.state.finished {
            for r in self.step(evaluator, jobs)? {
                sink(&r);
            }
        }
        Ok(())
    }

    /// Full history of a fresh run.
    pub fn run_to_end<E: Evaluator>(config: SearchConfig, algorithm: Algorithm, evaluator: &mut E) -> Result<Vec<HistoryRecord>> {
        let mut search = Search::new(config, algorithm)?;
        let mut history = Vec::new();
        search.run(evaluator, 1, |r| history.push(r.clone()))?;
        Ok(history)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}

fn truncate_history(path: &Path, keep: usize) -> Result<()> {
    if !path.exists() {
        if keep == 0 {
            return Ok(());
        }
        return Err(EvolutionError::Checkpoint("history file is missing".into()));
    }
    let reader = BufReader::new(File::open(path)?);
    let mut kept = String::new();
    let mut n = 0;
    for line in reader.lines() {
        if n == keep {
            break;
        }
        kept.push_str(&line?);
        kept.push('\n');
        n += 1;
    }
    if n < keep {
        return Err(EvolutionError::Checkpoint(format!(
            "history has {n} records but the checkpoint expects {keep}"
        )));
    }
    write_atomic(path, kept.as_bytes())?;
    Ok(())
}

/// Runs a search that persists into `dir`: the history is appended after
/// every iteration, followed by the checkpoint and evaluator state. With
/// `resume`, the previous checkpoint in `dir` is loaded and the history is
/// cut back to the records it accounts for. `halt_after` stops after that
/// many iterations of this invocation, leaving a resumable directory.
pub fn run_persistent<E: Evaluator>(
    fresh: Option<(SearchConfig, Algorithm)>,
    evaluator: &mut E,
    dir: &Path,
    jobs: usize,
    halt_after: Option<usize>,
) -> Result<Search> {
    fs::create_dir_all(dir)?;
    let history_path = dir.join(HISTORY_FILE);
    let cp_path = dir.join(CHECKPOINT_FILE);
    let ev_path = dir.join(EVALUATOR_FILE);
    let mut search = match fresh {
        Some((config, algorithm)) => {
            if history_path.exists() {
                fs::remove_file(&history_path)?;
            }
            Search::new(config, algorithm)?
        }
        None => {
            let text = fs::read_to_string(&cp_path)
                .map_err(|e| EvolutionError::Checkpoint(format!("cannot read {}: {e}", cp_path.display())))?;
            let cp: Checkpoint = serde_json::from_str(&text).map_err(|e| EvolutionError::Checkpoint(e.to_string()))?;
            let search = Search::from_checkpoint(cp)?;
            truncate_history(&history_path, search.history_len)?;
            if ev_path.exists() {
                evaluator
                    .load_state(&fs::read(&ev_path)?)
                    .map_err(EvolutionError::Checkpoint)?;
            }
            search
        }
    };
    let mut steps = 0;
    while !search.is_finished() && halt_after.is_none_or(|h| steps < h) {
        let records = search.step(evaluator, jobs)?;
        let mut out = OpenOptions::new().create(true).append(true).open(&history_path)?;
        for r in &records {
            let line = serde_json::to_string(r).map_err(|e| EvolutionError::History(e.to_string()))?;
            writeln!(out, "{line}")?;
        }
        out.sync_data()?;
        if let Some(bytes) = evaluator.save_state() {
            write_atomic(&ev_path, &bytes)?;
        }
        let cp = serde_json::to_string_pretty(&search.checkpoint()).map_err(|e| EvolutionError::Checkpoint(e.to_string()))?;
        write_atomic(&cp_path, cp.as_bytes())?;
        steps += 1;
    }
    Ok(search)
}

/// Parses a history file; `line` in errors is 1-based.
pub fn read_history(text: &str) -> Result<Vec<HistoryRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| EvolutionError::History(format!("line {}: {e}", i + 1))))
        .collect()
}
