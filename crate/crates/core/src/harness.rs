//! Synthetic facts, edit scoring, and the experiment drivers.
//!
//! A fact is an input `x` with the model's original output `t_old` and a new
//! target output `t_new`. Editing it means computing its key at the edit layer,
//! solving for the value that produces `t_new`, and folding the key–value pair
//! into a closed-form update. Scores compare distances in output space:
//!
//! - efficacy (ES): the edited output at `x` is closer to `t_new` than `t_old`;
//! - paraphrase (PS): the same test at perturbed copies of `x`;
//! - neighborhood (NS): unedited neighbours of an edited fact stay closer to
//!   their own `t_old` than to the edited fact's `t_new`.
//!
//! Ties count as failures.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::editors::{
    emmet_delta_factored, memit_delta, pm_objective, rome_delta_factored, Algorithm,
    EditBatchMatrices, EditDelta, ObjectiveBreakdown,
};
use crate::error::{EditError, Result};
use crate::numerics::{cosine, distance, Matrix};
use crate::toy_model::{
    estimate_preservation, gaussian_vec, seeded_rng, PreservationBasis, ToyModel, ToyModelConfig,
};
use crate::value_solver::{solve_value_from, ValueSolveOptions};

/// (batch size, number of batches) pairs of the reference protocol; each
/// multiplies to 4096 edits.
pub const REFERENCE_BATCH_SCHEDULE: [(usize, usize); 6] = [
    (1, 4096),
    (16, 256),
    (64, 64),
    (256, 16),
    (1024, 4),
    (4096, 1),
];

/// Desk-scale fact pool and batch sizes.
pub const DESK_NUM_FACTS: usize = 512;
pub const DESK_BATCH_SIZES: [usize; 4] = [1, 8, 32, 128];

/// Target outputs closer than this to the original are resampled.
const MIN_TARGET_SHIFT: f64 = 1e-6;
const FACT_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFact {
    pub id: usize,
    pub x: Vec<f64>,
    pub paraphrases: Vec<Vec<f64>>,
    pub t_old: Vec<f64>,
    pub t_new: Vec<f64>,
    pub neighbor_ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FactOptions {
    pub num_facts: usize,
    pub n_paraphrases: usize,
    pub para_noise: f64,
    pub neighbor_k: usize,
}

impl Default for FactOptions {
    fn default() -> Self {
        Self {
            num_facts: DESK_NUM_FACTS,
            n_paraphrases: 3,
            para_noise: 0.25,
            neighbor_k: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreservationOptions {
    pub n_samples: usize,
    pub ridge_eps: f64,
}

impl Default for PreservationOptions {
    fn default() -> Self {
        Self {
            n_samples: 1024,
            ridge_eps: 1e-6,
        }
    }
}

/// Generates `opts.num_facts` facts against `model`, with neighbours chosen by
/// key cosine similarity at `layer`.
pub fn gen_facts(
    model: &ToyModel,
    layer: usize,
    opts: &FactOptions,
    seed: u64,
) -> Result<Vec<SyntheticFact>> {
    model.check_layer(layer)?;
    if opts.num_facts == 0 {
        return Err(EditError::InvalidConfig("num_facts must be at least 1".into()));
    }
    if opts.n_paraphrases == 0 {
        return Err(EditError::InvalidConfig("n_paraphrases must be at least 1".into()));
    }
    if !(opts.para_noise > 0.0 && opts.para_noise.is_finite()) {
        return Err(EditError::InvalidConfig(format!(
            "para_noise must be positive, got {}",
            opts.para_noise
        )));
    }
    if opts.neighbor_k >= opts.num_facts {
        return Err(EditError::InvalidConfig(format!(
            "neighbor_k {} needs at least {} facts",
            opts.neighbor_k,
            opts.neighbor_k + 1
        )));
    }
    let d = model.d_model();
    let mut rng = seeded_rng(seed, FACT_STREAM);

    // Draw every random number before any model-dependent work so the same
    // seed yields the same inputs regardless of layer.
    struct Draw {
        x: Vec<f64>,
        paraphrases: Vec<Vec<f64>>,
        source: Vec<f64>,
    }
    let draws: Vec<Draw> = (0..opts.num_facts)
        .map(|_| {
            let x = gaussian_vec(&mut rng, d);
            let paraphrases = (0..opts.n_paraphrases)
                .map(|_| {
                    let eta = gaussian_vec(&mut rng, d);
                    x.iter().zip(&eta).map(|(a, n)| a + opts.para_noise * n).collect()
                })
                .collect();
            let source = gaussian_vec(&mut rng, d);
            Draw {
                x,
                paraphrases,
                source,
            }
        })
        .collect();

    let evaluated: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = draws
        .par_iter()
        .map(|draw| {
            let fwd = model.forward(&draw.x)?;
            let t_new = model.output(&draw.source)?;
            if distance(&t_new, &fwd.output) <= MIN_TARGET_SHIFT {
                return Err(EditError::InvalidConfig(
                    "sampled target coincides with the original output".into(),
                ));
            }
            let key = fwd.keys[layer].clone();
            Ok((fwd.output, t_new, key))
        })
        .collect::<Result<_>>()?;

    let keys: Vec<&Vec<f64>> = evaluated.iter().map(|e| &e.2).collect();
    let neighbors: Vec<Vec<usize>> = (0..keys.len())
        .into_par_iter()
        .map(|i| {
            let mut sims: Vec<(f64, usize)> = (0..keys.len())
                .filter(|&j| j != i)
                .map(|j| (cosine(keys[i], keys[j]), j))
                .collect();
            sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            sims.into_iter().take(opts.neighbor_k).map(|(_, j)| j).collect()
        })
        .collect();

    Ok(draws
        .into_iter()
        .zip(evaluated)
        .zip(neighbors)
        .enumerate()
        .map(|(id, ((draw, (t_old, t_new, _)), neighbor_ids))| SyntheticFact {
            id,
            x: draw.x,
            paraphrases: draw.paraphrases,
            t_old,
            t_new,
            neighbor_ids,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub es: f64,
    pub ps: f64,
    pub ns: f64,
    /// Harmonic mean of the three scores on the percentage scale.
    pub s: f64,
    pub edits_so_far: usize,
    pub batch_index: usize,
    pub objective: ObjectiveBreakdown,
    pub delta_fro: f64,
}

/// Harmonic mean of three percentages; 0 when any of them is 0.
pub fn harmonic_score(es_pct: f64, ps_pct: f64, ns_pct: f64) -> f64 {
    if es_pct <= 0.0 || ps_pct <= 0.0 || ns_pct <= 0.0 {
        return 0.0;
    }
    3.0 / (1.0 / es_pct + 1.0 / ps_pct + 1.0 / ns_pct)
}

/// Composite score from fractional ES/PS/NS.
pub fn composite_score(es: f64, ps: f64, ns: f64) -> f64 {
    harmonic_score(100.0 * es, 100.0 * ps, 100.0 * ns)
}

#[derive(Default, Clone, Copy)]
struct Tally {
    es_hits: usize,
    ps_hits: usize,
    ps_total: usize,
    ns_hits: usize,
    ns_total: usize,
}

/// Scores `edited` on the facts in `edited_ids`.
///
/// NS is 1 when no edited fact has an unedited neighbour (nothing to disturb).
pub fn eval_metrics(
    edited: &ToyModel,
    facts: &[SyntheticFact],
    edited_ids: &[usize],
    layer: usize,
) -> Result<MetricsReport> {
    edited.check_layer(layer)?;
    let index: HashMap<usize, usize> = facts.iter().enumerate().map(|(i, f)| (f.id, i)).collect();
    let lookup = |id: usize| -> Result<&SyntheticFact> {
        index
            .get(&id)
            .map(|&i| &facts[i])
            .ok_or(EditError::UnknownFactId(id))
    };
    let edited_set: HashSet<usize> = edited_ids.iter().copied().collect();
    let edited_facts: Vec<&SyntheticFact> =
        edited_ids.iter().map(|&id| lookup(id)).collect::<Result<_>>()?;
    if edited_facts.is_empty() {
        return Err(EditError::InvalidConfig("no edited facts to evaluate".into()));
    }

    let tallies: Vec<Tally> = edited_facts
        .par_iter()
        .map(|fact| {
            let prefers_new = |input: &[f64]| -> Result<bool> {
                let out = edited.output(input)?;
                Ok(distance(&out, &fact.t_new) < distance(&out, &fact.t_old))
            };
            let mut t = Tally {
                es_hits: prefers_new(&fact.x)? as usize,
                ..Default::default()
            };
            for p in &fact.paraphrases {
                t.ps_total += 1;
                t.ps_hits += prefers_new(p)? as usize;
            }
            for &n in &fact.neighbor_ids {
                if edited_set.contains(&n) {
                    continue;
                }
                let neighbor = lookup(n)?;
                let out = edited.output(&neighbor.x)?;
                t.ns_total += 1;
                if distance(&out, &neighbor.t_old) < distance(&out, &fact.t_new) {
                    t.ns_hits += 1;
                }
            }
            Ok(t)
        })
        .collect::<Result<_>>()?;

    let total = tallies.iter().fold(Tally::default(), |acc, t| Tally {
        es_hits: acc.es_hits + t.es_hits,
        ps_hits: acc.ps_hits + t.ps_hits,
        ps_total: acc.ps_total + t.ps_total,
        ns_hits: acc.ns_hits + t.ns_hits,
        ns_total: acc.ns_total + t.ns_total,
    });
    let es = total.es_hits as f64 / edited_facts.len() as f64;
    let ps = total.ps_hits as f64 / total.ps_total.max(1) as f64;
    let ns = if total.ns_total == 0 {
        1.0
    } else {
        total.ns_hits as f64 / total.ns_total as f64
    };
    Ok(MetricsReport {
        es,
        ps,
        ns,
        s: composite_score(es, ps, ns),
        edits_so_far: edited_facts.len(),
        batch_index: 0,
        objective: ObjectiveBreakdown {
            preservation: 0.0,
            memorization: 0.0,
            lambda: 0.0,
        },
        delta_fro: 0.0,
    })
}

/// Mean of per-edit reports, with S recomputed from the mean scores.
pub fn aggregate(reports: &[MetricsReport]) -> Option<MetricsReport> {
    let n = reports.len();
    if n == 0 {
        return None;
    }
    let mean = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n as f64;
    let es = mean(&|r| r.es);
    let ps = mean(&|r| r.ps);
    let ns = mean(&|r| r.ns);
    Some(MetricsReport {
        es,
        ps,
        ns,
        s: composite_score(es, ps, ns),
        edits_so_far: reports.iter().map(|r| r.edits_so_far).sum(),
        batch_index: 0,
        objective: ObjectiveBreakdown {
            preservation: mean(&|r| r.objective.preservation),
            memorization: mean(&|r| r.objective.memorization),
            lambda: reports[0].objective.lambda,
        },
        delta_fro: mean(&|r| r.delta_fro),
    })
}

/// `Ŵ = W0 + Δ` at `layer`; every other block is shared with `model`.
pub fn apply_edit(model: &ToyModel, layer: usize, delta: &EditDelta) -> Result<ToyModel> {
    model.check_layer(layer)?;
    let w_hat = model.down_proj(layer).add(&delta.delta)?;
    model.with_down_proj(layer, w_hat)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Singular,
    Batched,
    SequentialBatched,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub algorithm: Algorithm,
    pub layer: usize,
    pub strategy: Strategy,
    pub batch_size: usize,
    pub total_edits: usize,
    /// MEMIT preservation weight, or EMMET Gram ridge. Ignored by ROME.
    pub lambda: f64,
    pub seed: u64,
    pub model_config: ToyModelConfig,
    #[serde(default = "default_true")]
    pub eval_every_batch: bool,
    #[serde(default)]
    pub facts: FactOptions,
    #[serde(default)]
    pub preservation: PreservationOptions,
    #[serde(default)]
    pub value_solver: ValueSolveOptions,
    /// Append each batch's edit keys to the preserved keys before the next batch.
    #[serde(default)]
    pub augment_preservation: bool,
}

impl ExperimentPlan {
    pub fn new(
        algorithm: Algorithm,
        strategy: Strategy,
        layer: usize,
        batch_size: usize,
        total_edits: usize,
        seed: u64,
        model_config: ToyModelConfig,
    ) -> Self {
        let lambda = match algorithm {
            Algorithm::Memit => 1.0,
            Algorithm::Rome | Algorithm::Emmet => 0.0,
        };
        Self {
            algorithm,
            layer,
            strategy,
            batch_size,
            total_edits,
            lambda,
            seed,
            model_config,
            eval_every_batch: true,
            facts: FactOptions::default(),
            preservation: PreservationOptions::default(),
            value_solver: ValueSolveOptions::default(),
            augment_preservation: false,
        }
    }

    pub fn num_batches(&self) -> usize {
        if self.batch_size == 0 {
            0
        } else {
            self.total_edits / self.batch_size
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config.validate()?;
        self.value_solver.validate()?;
        let invalid = |msg: String| Err(EditError::InvalidConfig(msg));
        if self.batch_size == 0 || self.total_edits == 0 {
            return invalid("batch_size and total_edits must be positive".into());
        }
        if self.total_edits % self.batch_size != 0 {
            return invalid(format!(
                "total_edits {} is not a multiple of batch_size {}",
                self.total_edits, self.batch_size
            ));
        }
        if self.layer >= self.model_config.num_layers {
            return invalid(format!(
                "layer {} out of range for a {}-layer model",
                self.layer, self.model_config.num_layers
            ));
        }
        if self.total_edits > self.facts.num_facts {
            return invalid(format!(
                "total_edits {} exceeds the fact pool of {}",
                self.total_edits, self.facts.num_facts
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return invalid(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        match self.strategy {
            Strategy::Singular if self.batch_size != 1 => {
                return invalid("singular editing uses batch_size 1".into());
            }
            Strategy::Batched if self.batch_size != self.total_edits => {
                return invalid("batched editing applies all edits in one batch".into());
            }
            Strategy::Batched if self.algorithm == Algorithm::Rome => {
                return invalid("batched editing needs memit or emmet".into());
            }
            _ => {}
        }
        if self.algorithm == Algorithm::Rome && self.batch_size != 1 {
            return invalid("rome edits one fact at a time".into());
        }
        if self.algorithm == Algorithm::Emmet && self.batch_size > self.model_config.d_ffn {
            return Err(EditError::SingularGram(format!(
                "EMMET batch_size {} exceeds d_ffn {}: the key Gram matrix cannot be invertible",
                self.batch_size, self.model_config.d_ffn
            )));
        }
        Ok(())
    }
}

/// A prepared experiment: base model, preserved keys, and facts.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub plan: ExperimentPlan,
    pub base: ToyModel,
    pub basis: PreservationBasis,
    pub facts: Vec<SyntheticFact>,
}

impl Experiment {
    pub fn new(plan: ExperimentPlan) -> Result<Self> {
        plan.validate()?;
        let base = ToyModel::init(plan.model_config.clone())?;
        Self::with_model(plan, base)
    }

    pub fn with_model(plan: ExperimentPlan, base: ToyModel) -> Result<Self> {
        plan.validate()?;
        let facts = gen_facts(&base, plan.layer, &plan.facts, plan.seed)?;
        Self::with_model_and_facts(plan, base, facts)
    }

    pub fn with_model_and_facts(
        plan: ExperimentPlan,
        base: ToyModel,
        facts: Vec<SyntheticFact>,
    ) -> Result<Self> {
        plan.validate()?;
        if base.config() != &plan.model_config {
            return Err(EditError::InvalidConfig(
                "model does not match the plan's model_config".into(),
            ));
        }
        if facts.len() < plan.total_edits {
            return Err(EditError::InvalidConfig(format!(
                "{} facts for {} edits",
                facts.len(),
                plan.total_edits
            )));
        }
        let basis = estimate_preservation(
            &base,
            plan.layer,
            plan.preservation.n_samples,
            plan.preservation.ridge_eps,
            plan.seed,
        )?;
        Ok(Self {
            plan,
            base,
            basis,
            facts,
        })
    }

    fn edit_ids(&self) -> Vec<usize> {
        self.facts[..self.plan.total_edits].iter().map(|f| f.id).collect()
    }

    /// Keys from `model`, values solved on `model`, for the given facts.
    pub fn build_batch(&self, model: &ToyModel, ids: &[usize]) -> Result<EditBatchMatrices> {
        let layer = self.plan.layer;
        let index: HashMap<usize, &SyntheticFact> = self.facts.iter().map(|f| (f.id, f)).collect();
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = ids
            .par_iter()
            .map(|id| {
                let fact = index.get(id).ok_or(EditError::UnknownFactId(*id))?;
                let mut fwd = model.forward(&fact.x)?;
                let key = fwd.keys.swap_remove(layer);
                let v_init = model.down_proj(layer).matvec(&key)?;
                let solution = solve_value_from(
                    model,
                    layer,
                    &fwd.hidden[layer],
                    &v_init,
                    &fact.t_new,
                    &self.plan.value_solver,
                )?;
                Ok((key, solution.value))
            })
            .collect::<Result<_>>()?;
        let keys: Vec<&Vec<f64>> = pairs.iter().map(|p| &p.0).collect();
        let values: Vec<&Vec<f64>> = pairs.iter().map(|p| &p.1).collect();
        EditBatchMatrices::new(
            Matrix::from_columns(&keys),
            Matrix::from_columns(&values),
            ids.to_vec(),
        )
    }

    /// Closed-form update of the plan's algorithm at the given λ.
    pub fn compute_delta(
        &self,
        model: &ToyModel,
        basis: &PreservationBasis,
        batch: &EditBatchMatrices,
        lambda: f64,
    ) -> Result<EditDelta> {
        let w0 = model.down_proj(self.plan.layer);
        match self.plan.algorithm {
            Algorithm::Rome => {
                if batch.len() != 1 {
                    return Err(EditError::InvalidConfig("rome edits one fact at a time".into()));
                }
                rome_delta_factored(
                    w0,
                    basis.cholesky(),
                    &batch.keys.column(0),
                    &batch.values.column(0),
                )
            }
            Algorithm::Memit => memit_delta(w0, &basis.covariance, batch, lambda),
            Algorithm::Emmet => emmet_delta_factored(w0, basis.cholesky(), batch, lambda),
        }
    }

    fn edit_step(
        &self,
        model: &ToyModel,
        basis: &PreservationBasis,
        ids: &[usize],
        lambda: f64,
    ) -> Result<(ToyModel, EditBatchMatrices, EditDelta, ObjectiveBreakdown)> {
        let layer = self.plan.layer;
        let batch = self.build_batch(model, ids)?;
        let delta = self.compute_delta(model, basis, &batch, lambda)?;
        let edited = apply_edit(model, layer, &delta)?;
        let objective = pm_objective(
            model.down_proj(layer),
            edited.down_proj(layer),
            &basis.keys,
            &batch,
            lambda,
        )?;
        Ok((edited, batch, delta, objective))
    }

    /// One fresh edit of the base model per fact; one report per edit.
    pub fn run_singular(&self) -> Result<Vec<MetricsReport>> {
        let ids = self.edit_ids();
        let lambda = self.plan.lambda;
        ids.par_iter()
            .enumerate()
            .map(|(i, &id)| {
                let (edited, _, delta, objective) =
                    self.edit_step(&self.base, &self.basis, &[id], lambda)?;
                let mut report = eval_metrics(&edited, &self.facts, &[id], self.plan.layer)?;
                report.batch_index = i + 1;
                report.objective = objective;
                report.delta_fro = delta.frobenius_norm();
                Ok(report)
            })
            .collect()
    }

    /// All `total_edits` facts in a single update of the base model.
    pub fn run_batched(&self) -> Result<MetricsReport> {
        self.run_batched_with_lambda(self.plan.lambda)
    }

    pub fn run_batched_with_lambda(&self, lambda: f64) -> Result<MetricsReport> {
        if self.plan.algorithm == Algorithm::Rome {
            return Err(EditError::InvalidConfig("batched editing needs memit or emmet".into()));
        }
        let ids = self.edit_ids();
        let (edited, _, delta, objective) = self.edit_step(&self.base, &self.basis, &ids, lambda)?;
        let mut report = eval_metrics(&edited, &self.facts, &ids, self.plan.layer)?;
        report.batch_index = 1;
        report.objective = objective;
        report.delta_fro = delta.frobenius_norm();
        Ok(report)
    }

    /// Batches applied one after another, each computed against the model
    /// holding all previous batches. After each batch (or only the last, when
    /// `eval_every_batch` is off) every fact edited so far is re-scored.
    pub fn run_sequential_batched(&self) -> Result<Vec<MetricsReport>> {
        let ids = self.edit_ids();
        let num_batches = self.plan.num_batches();
        let mut model = self.base.clone();
        let mut basis = self.basis.clone();
        let mut reports = Vec::new();
        for (t, chunk) in ids.chunks(self.plan.batch_size).enumerate() {
            let (edited, batch, delta, objective) =
                self.edit_step(&model, &basis, chunk, self.plan.lambda)?;
            model = edited;
            if self.plan.augment_preservation {
                basis = basis.augmented(&batch.keys)?;
            }
            if self.plan.eval_every_batch || t + 1 == num_batches {
                let so_far = &ids[..(t + 1) * self.plan.batch_size];
                let mut report = eval_metrics(&model, &self.facts, so_far, self.plan.layer)?;
                report.batch_index = t + 1;
                report.objective = objective;
                report.delta_fro = delta.frobenius_norm();
                reports.push(report);
            }
        }
        Ok(reports)
    }

    /// Dispatches on the plan's strategy.
    pub fn run(&self) -> Result<Vec<MetricsReport>> {
        match self.plan.strategy {
            Strategy::Singular => self.run_singular(),
            Strategy::Batched => Ok(vec![self.run_batched()?]),
            Strategy::SequentialBatched => self.run_sequential_batched(),
        }
    }
}

pub fn run_singular(plan: &ExperimentPlan) -> Result<Vec<MetricsReport>> {
    if plan.strategy != Strategy::Singular {
        return Err(EditError::InvalidConfig("plan strategy is not singular".into()));
    }
    Experiment::new(plan.clone())?.run_singular()
}

pub fn run_batched(plan: &ExperimentPlan) -> Result<MetricsReport> {
    if plan.strategy != Strategy::Batched {
        return Err(EditError::InvalidConfig("plan strategy is not batched".into()));
    }
    Experiment::new(plan.clone())?.run_batched()
}

pub fn run_sequential_batched(plan: &ExperimentPlan) -> Result<Vec<MetricsReport>> {
    if plan.strategy != Strategy::SequentialBatched {
        return Err(EditError::InvalidConfig("plan strategy is not sequential_batched".into()));
    }
    Experiment::new(plan.clone())?.run_sequential_batched()
}

/// Singular editing at each layer on the same fact inputs; aggregated report per layer.
pub fn layer_sweep(
    template: &ExperimentPlan,
    layers: &[usize],
) -> Result<BTreeMap<usize, MetricsReport>> {
    let mut out = BTreeMap::new();
    for &layer in layers {
        let mut plan = template.clone();
        plan.layer = layer;
        plan.strategy = Strategy::Singular;
        plan.batch_size = 1;
        let reports = Experiment::new(plan)?.run_singular()?;
        let agg = aggregate(&reports).expect("total_edits is positive");
        out.insert(layer, agg);
    }
    Ok(out)
}

/// Batched editing of the same facts at each λ, in the order given.
pub fn lambda_sweep(template: &ExperimentPlan, lambdas: &[f64]) -> Result<Vec<(f64, MetricsReport)>> {
    if template.algorithm == Algorithm::Rome {
        return Err(EditError::InvalidConfig("lambda sweeps need memit or emmet".into()));
    }
    let mut plan = template.clone();
    plan.strategy = Strategy::Batched;
    plan.batch_size = plan.total_edits;
    let experiment = Experiment::new(plan)?;
    lambdas
        .iter()
        .map(|&lambda| {
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return Err(EditError::InvalidConfig(format!("invalid lambda {lambda}")));
            }
            Ok((lambda, experiment.run_batched_with_lambda(lambda)?))
        })
        .collect()
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    assert_eq!(xs.len(), ys.len());
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Runs `f` on a pool capped at `threads` workers, or on the global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match threads {
        Some(n) if n > 0 => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(|pool| pool.install(f))
            .unwrap_or_else(|err| panic!("cannot build a {n}-thread pool: {err}")),
        _ => f(),
    }
}
