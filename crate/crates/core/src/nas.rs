//! One-shot channel search: sandwich training of a weight-shared supernet
//! and an evolutionary search over per-block width ratios.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::LabeledBox;
use crate::graph::{Graph, NodeId, NormMode};
use crate::model::{trace_cost, ModelConfig, PicoDet};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{evaluate, forward_backward, sample_batch, scheduled_lr, AnchorCache, Sgd, TrainSetup};

pub const RATIO_CHOICES: [f64; 5] = [0.5, 0.675, 0.75, 0.875, 1.0];
/// Same grid with 0.625 in place of 0.675.
pub const RATIO_CHOICES_ALT: [f64; 5] = [0.5, 0.625, 0.75, 0.875, 1.0];
pub const SANDWICH_SIZE: usize = 8;
pub const DEFAULT_GRAD_CLIP: f64 = 35.0;

/// Width ratio of every backbone block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ArchGenotype {
    pub ratios: Vec<f64>,
}

impl ArchGenotype {
    pub fn uniform(num_blocks: usize, ratio: f64) -> Self {
        ArchGenotype { ratios: vec![ratio; num_blocks] }
    }

    fn key(&self) -> Vec<u64> {
        self.ratios.iter().map(|r| r.to_bits()).collect()
    }

    /// `{"model": {"backbone": {"block_ratios": [...]}}}`, mergeable into an
    /// experiment config.
    pub fn config_fragment(&self) -> serde_json::Value {
        serde_json::json!({ "model": { "backbone": { "block_ratios": self.ratios } } })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub choices: Vec<f64>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace { choices: RATIO_CHOICES.to_vec() }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.choices.is_empty() {
            return Err("at least one ratio choice is required".into());
        }
        if self.choices.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return Err("ratio choices must lie in (0, 1]".into());
        }
        Ok(())
    }

    pub fn largest(&self) -> f64 {
        self.choices.iter().copied().fold(f64::MIN, f64::max)
    }

    pub fn smallest(&self) -> f64 {
        self.choices.iter().copied().fold(f64::MAX, f64::min)
    }

    pub fn random<R: Rng>(&self, num_blocks: usize, rng: &mut R) -> ArchGenotype {
        ArchGenotype { ratios: (0..num_blocks).map(|_| *self.choices.choose(rng).expect("non-empty")).collect() }
    }

    pub fn check(&self, g: &ArchGenotype, num_blocks: usize) -> Result<()> {
        if g.ratios.len() != num_blocks {
            return Err(Error::InvalidArgument(format!(
                "genotype has {} ratios but the supernet has {num_blocks} blocks",
                g.ratios.len()
            )));
        }
        if let Some(r) = g.ratios.iter().find(|r| !self.choices.contains(r)) {
            return Err(Error::InvalidArgument(format!("ratio {r} is not in {:?}", self.choices)));
        }
        Ok(())
    }
}

/// `[largest, smallest, 6 random]`.
pub fn sandwich_sample<R: Rng>(space: &SearchSpace, num_blocks: usize, rng: &mut R) -> Vec<ArchGenotype> {
    let mut out = vec![ArchGenotype::uniform(num_blocks, space.largest()), ArchGenotype::uniform(num_blocks, space.smallest())];
    out.extend((2..SANDWICH_SIZE).map(|_| space.random(num_blocks, rng)));
    out
}

/// A child network: the supernet run with a genotype's ratios. Parameters
/// are the leading slices of the supernet tensors.
#[derive(Debug, Clone, Copy)]
pub struct ChildModel<'a> {
    pub supernet: &'a PicoDet,
    pub genotype: &'a ArchGenotype,
}

impl ChildModel<'_> {
    pub fn forward(&self, g: &mut Graph, images: NodeId) -> Vec<NodeId> {
        self.supernet.forward_with_ratios(g, images, &self.genotype.ratios)
    }

    /// Inner channels of every block.
    pub fn mid_channels(&self) -> Vec<usize> {
        self.supernet.cfg.backbone.mid_channels(&self.genotype.ratios)
    }
}

pub fn apply_genotype<'a>(supernet: &'a PicoDet, g: &'a ArchGenotype) -> Result<ChildModel<'a>> {
    let n = supernet.cfg.backbone.num_blocks();
    if g.ratios.len() != n {
        return Err(Error::InvalidArgument(format!("genotype has {} ratios but the supernet has {n} blocks", g.ratios.len())));
    }
    Ok(ChildModel { supernet, genotype: g })
}

/// Compute cost of a genotype in MFLOPs. Swap in a device lookup table to
/// search under measured latency instead.
pub trait CostEstimator {
    fn mflops(&mut self, g: &ArchGenotype) -> Result<f64>;
}

/// `2 * MACs + elementwise` from a shape-only trace.
pub struct TraceEstimator {
    model: PicoDet,
    store: ParamStore,
    input: usize,
    cache: BTreeMap<Vec<u64>, f64>,
}

impl TraceEstimator {
    pub fn new(cfg: &ModelConfig, input: usize) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = PicoDet::build(cfg, &mut store, 0)?;
        Ok(TraceEstimator { model, store, input, cache: BTreeMap::new() })
    }
}

impl CostEstimator for TraceEstimator {
    fn mflops(&mut self, g: &ArchGenotype) -> Result<f64> {
        apply_genotype(&self.model, g)?;
        if let Some(&v) = self.cache.get(&g.key()) {
            return Ok(v);
        }
        let c = trace_cost(&self.model, &mut self.store, self.input, Some(&g.ratios));
        let v = (2 * c.macs + c.elementwise) as f64 / 1e6;
        self.cache.insert(g.key(), v);
        Ok(v)
    }
}

pub fn estimate_flops(cfg: &ModelConfig, g: &ArchGenotype, input: usize) -> Result<f64> {
    TraceEstimator::new(cfg, input)?.mflops(g)
}

/// Scores a genotype; higher is better.
pub trait Fitness {
    fn fitness(&mut self, g: &ArchGenotype) -> Result<f64>;
}

/// mAP@0.5 of the weight-shared child on a fixed subset. Normalisation uses
/// the statistics of each evaluation batch, since the running statistics
/// of a supernet mix every sampled width.
pub struct SupernetFitness<'a> {
    pub model: &'a PicoDet,
    pub store: &'a mut ParamStore,
    pub subset: &'a Dataset,
    pub input: u32,
}

impl Fitness for SupernetFitness<'_> {
    fn fitness(&mut self, g: &ArchGenotype) -> Result<f64> {
        apply_genotype(self.model, g)?;
        let (m, _) = evaluate(self.model, self.store, self.subset, self.input, &g.ratios, NormMode::Batch { update: false })?;
        Ok(m.map50)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchBudget {
    /// Upper bound on MFLOPs at `input_size`.
    pub max_flops: f64,
    pub population: usize,
    pub generations: usize,
    pub mutation_prob: f64,
    pub crossover_prob: f64,
    pub tournament_size: usize,
    /// Images used for fitness; 0 uses the whole set.
    pub eval_subset_size: usize,
    /// Random draws allowed per feasible genotype needed.
    pub max_retries: usize,
}

impl Default for SearchBudget {
    fn default() -> Self {
        SearchBudget {
            max_flops: f64::INFINITY,
            population: 24,
            generations: 10,
            mutation_prob: 0.1,
            crossover_prob: 0.5,
            tournament_size: 3,
            eval_subset_size: 0,
            max_retries: 100,
        }
    }
}

impl SearchBudget {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.max_flops > 0.0) {
            return Err(format!("max_flops must be positive, got {}", self.max_flops));
        }
        if self.population < 4 {
            return Err(format!("population must be at least 4, got {}", self.population));
        }
        if !(0.0..=1.0).contains(&self.mutation_prob) || !(0.0..=1.0).contains(&self.crossover_prob) {
            return Err("mutation_prob and crossover_prob must lie in [0, 1]".into());
        }
        if self.tournament_size == 0 || self.max_retries == 0 {
            return Err("tournament_size and max_retries must be positive".into());
        }
        Ok(())
    }
}

/// One line of the search log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRecord {
    pub generation: usize,
    pub genotype: ArchGenotype,
    pub flops: f64,
    pub fitness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: ArchGenotype,
    pub best_fitness: f64,
    pub best_flops: f64,
    /// Distinct genotypes evaluated.
    pub evaluations: usize,
    pub log: Vec<SearchRecord>,
}

impl SearchResult {
    /// Best fitness after each generation.
    pub fn best_by_generation(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for r in &self.log {
            if out.len() <= r.generation {
                out.resize(r.generation + 1, out.last().copied().unwrap_or(f64::NEG_INFINITY));
            }
            out[r.generation] = out[r.generation].max(r.fitness);
        }
        for i in 1..out.len() {
            out[i] = out[i].max(out[i - 1]);
        }
        out
    }
}

pub fn write_search_log(path: &Path, log: &[SearchRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in log {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Memoised fitness and cost lookups plus the evaluation log.
struct Evaluator<'a> {
    num_blocks: usize,
    max_flops: f64,
    cost: &'a mut dyn CostEstimator,
    fitness: &'a mut dyn Fitness,
    seen: BTreeMap<Vec<u64>, f64>,
    log: Vec<SearchRecord>,
}

impl Evaluator<'_> {
    fn feasible(&mut self, g: &ArchGenotype) -> Result<bool> {
        Ok(self.cost.mflops(g)? <= self.max_flops)
    }

    fn score(&mut self, g: &ArchGenotype, generation: usize) -> Result<f64> {
        if let Some(&f) = self.seen.get(&g.key()) {
            return Ok(f);
        }
        let fitness = self.fitness.fitness(g)?;
        let flops = self.cost.mflops(g)?;
        self.seen.insert(g.key(), fitness);
        self.log.push(SearchRecord { generation, genotype: g.clone(), flops, fitness });
        Ok(fitness)
    }

    fn finish(self) -> Result<SearchResult> {
        let best = self
            .log
            .iter()
            .filter(|r| r.flops <= self.max_flops)
            .fold(None::<&SearchRecord>, |acc, r| match acc {
                Some(a) if a.fitness >= r.fitness => Some(a),
                _ => Some(r),
            })
            .ok_or_else(|| Error::Infeasible("no genotype was evaluated".into()))?;
        debug_assert_eq!(best.genotype.ratios.len(), self.num_blocks);
        Ok(SearchResult {
            best: best.genotype.clone(),
            best_fitness: best.fitness,
            best_flops: best.flops,
            evaluations: self.log.len(),
            log: self.log.clone(),
        })
    }
}

fn random_feasible<R: Rng>(space: &SearchSpace, ev: &mut Evaluator, budget: &SearchBudget, rng: &mut R) -> Result<ArchGenotype> {
    for _ in 0..budget.max_retries {
        let g = space.random(ev.num_blocks, rng);
        if ev.feasible(&g)? {
            return Ok(g);
        }
    }
    Err(Error::Infeasible(format!("no genotype under {:.3} MFLOPs after {} draws", budget.max_flops, budget.max_retries)))
}

fn precheck(space: &SearchSpace, budget: &SearchBudget, num_blocks: usize, cost: &mut dyn CostEstimator) -> Result<()> {
    space.validate().map_err(|m| Error::config("nas.space", m))?;
    budget.validate().map_err(|m| Error::config("nas.budget", m))?;
    let smallest = cost.mflops(&ArchGenotype::uniform(num_blocks, space.smallest()))?;
    if smallest > budget.max_flops {
        return Err(Error::Infeasible(format!(
            "the smallest child needs {smallest:.3} MFLOPs, above the budget of {:.3}",
            budget.max_flops
        )));
    }
    Ok(())
}

fn tournament<'g, R: Rng>(pop: &'g [(ArchGenotype, f64)], k: usize, rng: &mut R) -> &'g ArchGenotype {
    let mut best: Option<&(ArchGenotype, f64)> = None;
    for _ in 0..k {
        let c = &pop[rng.gen_range(0..pop.len())];
        if best.is_none_or(|b| c.1 > b.1) {
            best = Some(c);
        }
    }
    &best.expect("k > 0").0
}

/// Elitist genetic search: tournament selection, single-point crossover and
/// per-gene resampling. Offspring that are over the budget or were already
/// scored are redrawn; after `max_retries` failures a parent is copied.
pub fn evolve<R: Rng>(
    space: &SearchSpace,
    num_blocks: usize,
    budget: &SearchBudget,
    cost: &mut dyn CostEstimator,
    fitness: &mut dyn Fitness,
    rng: &mut R,
) -> Result<SearchResult> {
    precheck(space, budget, num_blocks, cost)?;
    let mut ev = Evaluator { num_blocks, max_flops: budget.max_flops, cost, fitness, seen: BTreeMap::new(), log: Vec::new() };
    let mut pop = Vec::with_capacity(budget.population);
    for _ in 0..budget.population {
        let g = random_feasible(space, &mut ev, budget, rng)?;
        let f = ev.score(&g, 0)?;
        pop.push((g, f));
    }
    let elites = (budget.population / 4).max(1);
    for generation in 1..=budget.generations {
        pop.sort_by(|a, b| b.1.total_cmp(&a.1));
        let mut next: Vec<(ArchGenotype, f64)> = pop[..elites].to_vec();
        while next.len() < budget.population {
            let a = tournament(&pop, budget.tournament_size, rng).clone();
            let mut child = None;
            for _ in 0..budget.max_retries {
                let mut c = a.clone();
                if num_blocks > 1 && rng.gen_bool(budget.crossover_prob) {
                    let b = tournament(&pop, budget.tournament_size, rng);
                    let cut = rng.gen_range(1..num_blocks);
                    c.ratios[cut..].copy_from_slice(&b.ratios[cut..]);
                }
                for r in c.ratios.iter_mut() {
                    if rng.gen_bool(budget.mutation_prob) {
                        *r = *space.choices.choose(rng).expect("non-empty");
                    }
                }
                if !ev.seen.contains_key(&c.key()) && ev.feasible(&c)? {
                    child = Some(c);
                    break;
                }
            }
            let c = child.unwrap_or(a);
            let f = ev.score(&c, generation)?;
            next.push((c, f));
        }
        pop = next;
        log::debug!("generation {generation}: best fitness {:.4}", pop.iter().map(|p| p.1).fold(f64::MIN, f64::max));
    }
    ev.finish()
}

/// Uniform sampling of feasible genotypes until `evaluations` distinct ones
/// have been scored.
pub fn random_search<R: Rng>(
    space: &SearchSpace,
    num_blocks: usize,
    budget: &SearchBudget,
    evaluations: usize,
    cost: &mut dyn CostEstimator,
    fitness: &mut dyn Fitness,
    rng: &mut R,
) -> Result<SearchResult> {
    precheck(space, budget, num_blocks, cost)?;
    let mut ev = Evaluator { num_blocks, max_flops: budget.max_flops, cost, fitness, seen: BTreeMap::new(), log: Vec::new() };
    let space_size = space.choices.len().saturating_pow(num_blocks as u32);
    let target = evaluations.min(space_size).max(1);
    let mut draws = 0;
    while ev.log.len() < target && draws < target * budget.max_retries {
        draws += 1;
        let g = random_feasible(space, &mut ev, budget, rng)?;
        ev.score(&g, 0)?;
    }
    ev.finish()
}

/// Per-candidate losses of one sandwich step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupernetRecord {
    pub step: usize,
    pub lr: f64,
    pub losses: Vec<f64>,
    pub grad_norm: f64,
}

/// Sandwich-rule training of a supernet.
pub struct SupernetTrainer {
    pub model: PicoDet,
    pub store: ParamStore,
    pub opt: Sgd,
    pub setup: TrainSetup,
    pub space: SearchSpace,
    pub grad_clip: f64,
    pub step: usize,
    anchors: AnchorCache,
    rng: ChaCha8Rng,
}

impl SupernetTrainer {
    pub fn new(model: PicoDet, store: ParamStore, setup: TrainSetup, space: SearchSpace) -> Result<Self> {
        setup.train.validate().map_err(|m| Error::config("train", m))?;
        space.validate().map_err(|m| Error::config("nas.space", m))?;
        let opt = Sgd::new(&store, setup.train.momentum, setup.train.weight_decay);
        let grad_clip = setup.train.grad_clip.unwrap_or(DEFAULT_GRAD_CLIP);
        let rng = ChaCha8Rng::seed_from_u64(setup.train.seed);
        Ok(SupernetTrainer { model, store, opt, setup, space, grad_clip, step: 0, anchors: AnchorCache::default(), rng })
    }

    pub fn num_blocks(&self) -> usize {
        self.model.cfg.backbone.num_blocks()
    }

    /// Accumulates gradients of the eight sandwich candidates on one batch,
    /// clips the total norm and takes one optimizer step. Returns the
    /// candidate losses and the pre-clip gradient norm.
    pub fn train_step(&mut self, images: &Tensor, gts: &[Vec<LabeledBox>], lr: f64) -> Result<(Vec<f64>, f64)> {
        let candidates = sandwich_sample(&self.space, self.num_blocks(), &mut self.rng);
        self.store.zero_grad();
        let mut losses = Vec::with_capacity(candidates.len());
        for c in &candidates {
            let l = forward_backward(
                &self.model,
                &mut self.store,
                images.clone(),
                gts,
                &c.ratios,
                &self.setup.assigner,
                &self.setup.loss,
                &mut self.anchors,
            )?;
            if !l.total.is_finite() || !self.store.grads_finite() {
                return Err(Error::NonFiniteLoss { step: self.step, detail: format!("candidate {:?}: {l:?}", c.ratios) });
            }
            losses.push(l.total);
        }
        let norm = self.store.clip_grad_norm(self.grad_clip);
        self.opt.step(&mut self.store, lr);
        self.step += 1;
        Ok((losses, norm))
    }

    /// Trains for the configured schedule, writing `supernet_metrics.jsonl`
    /// and `supernet.ckpt` under `out_dir` when given.
    pub fn fit(&mut self, dataset: &Dataset, out_dir: Option<&Path>) -> Result<Vec<SupernetRecord>> {
        if dataset.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let cfg = self.setup.train.clone();
        let n = dataset.len();
        let per_epoch = cfg.iters_per_epoch(n);
        let total = cfg.total_iters(n);
        let boxes = dataset.boxes();
        let mut order: Vec<usize> = (0..n).collect();
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5E_ED0F_5A4D);
        let mut records = Vec::new();
        while self.step < total {
            let within = self.step % per_epoch;
            if within == 0 {
                order.shuffle(&mut epoch_rng);
            }
            let idx = &order[within * cfg.batch_size..((within + 1) * cfg.batch_size).min(n)];
            let (images, gts) = sample_batch(dataset, &boxes, idx, &mut self.rng, &self.setup.augment);
            let lr = scheduled_lr(self.step, total, &cfg);
            let (losses, grad_norm) = self.train_step(&images, &gts, lr)?;
            records.push(SupernetRecord { step: self.step, lr, losses, grad_norm });
        }
        if let Some(d) = out_dir {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let p = d.join("supernet_metrics.jsonl");
            let mut f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
            for r in &records {
                writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(&p, e))?;
            }
            let meta = serde_json::json!({ "model": self.model.cfg, "step": self.step, "supernet": true });
            self.store.save(&d.join(SUPERNET_FILE), meta)?;
        }
        Ok(records)
    }
}

pub const SUPERNET_FILE: &str = "supernet.ckpt";

/// The first `n` images of a dataset (all of them when `n` is 0).
pub fn subset(dataset: &Dataset, n: usize) -> Dataset {
    if n == 0 || n >= dataset.len() {
        return dataset.clone();
    }
    let mut index = dataset.index.clone();
    index.images.truncate(n);
    let keep: std::collections::BTreeSet<u64> = index.images.iter().map(|i| i.id).collect();
    index.annotations.retain(|a| keep.contains(&a.image_id));
    Dataset::in_memory(index, dataset.images[..n].to_vec())
}
