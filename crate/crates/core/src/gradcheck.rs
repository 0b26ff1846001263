//! Central finite-difference verification of the analytic gradients, per
//! loss term and parameter group, across every loss-configuration combination.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{tokenize, wrap_template, ToyEncoderParams, Vocab, DEFAULT_TRUNCATE_LENGTH};
use crate::hierarchy::{Hierarchy, NodeId};
use crate::losses::{FhcVariant, HccSource, LossConfig};
use crate::model::{Example, Model, ModelError, ParamGroup, TermWeights};
use crate::synth::build_tree;
use crate::verbalizer::{Mode, VerbalizerHead};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub hidden: usize,
    pub branching: Vec<usize>,
    pub batch: usize,
    pub vocab_words: usize,
    pub tokens_per_doc: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is ~0 are judged on absolute error.
    pub rel_floor: f64,
    pub seed: u64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            hidden: 8,
            branching: vec![2, 2, 2],
            batch: 4,
            vocab_words: 12,
            tokens_per_doc: 6,
            step: 1e-5,
            tolerance: 1e-4,
            rel_floor: 1e-8,
            seed: 17,
            lambda1: 1.0,
            lambda2: 0.5,
            alpha: 1.0,
            beta: 0.3,
            tau: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Classification,
    Hcc,
    Fhc,
    Total,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub mode: Mode,
    pub fhc_variant: FhcVariant,
    pub hcc_source: HccSource,
    pub term: Term,
    pub group: ParamGroup,
    pub params: usize,
    pub max_rel_error: f64,
    pub max_abs_analytic: f64,
    pub all_zero: bool,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<12} {:<10} {:<10} {:<15} {:<5} {:>6} {:>12} {:>6}\n",
            "mode", "fhc", "hcc", "term", "group", "params", "max_rel_err", "status"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<12} {:<10} {:<10} {:<15} {:<5} {:>6} {:>12.3e} {:>6}\n",
                format!("{:?}", r.mode),
                format!("{:?}", r.fhc_variant),
                format!("{:?}", r.hcc_source),
                format!("{:?}{}", r.term, if r.all_zero { " (zero)" } else { "" }),
                r.group.to_string(),
                r.params,
                r.max_rel_error,
                if r.passed { "ok" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Small random model, hierarchy and batch for one mode.
pub fn random_setup(cfg: &GradcheckConfig, mode: Mode) -> (Hierarchy, Model, Vec<Example>) {
    let h = build_tree(&cfg.branching);
    let depth = h.depth();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let words: Vec<String> = (0..cfg.vocab_words).map(|i| format!("w{i}")).collect();
    let vocab = Vocab::build(words.iter().map(String::as_str), depth);
    let mut encoder = ToyEncoderParams::init(vocab.len(), cfg.hidden, depth, 0.0, cfg.seed);
    encoder.embeddings.mapv_inplace(|v| v * 5.0);
    let mut head = VerbalizerHead::init(&h, &encoder.embeddings, &vocab, mode).expect("non-empty tree");
    for w in &mut head.weights {
        *w = Array2::from_shape_fn(w.raw_dim(), |_| rng.gen_range(-0.8..0.8));
    }
    for b in &mut head.biases {
        b.mapv_inplace(|_| rng.gen_range(-0.3..0.3));
    }
    let paths = h.leaf_paths();
    let batch = (0..cfg.batch)
        .map(|_| {
            let n_paths = if mode == Mode::MultiPath { rng.gen_range(1..=2) } else { 1 };
            let mut labels: BTreeSet<NodeId> = BTreeSet::new();
            for _ in 0..n_paths {
                labels.extend(paths[rng.gen_range(0..paths.len())].nodes.iter().copied());
            }
            let text: Vec<&str> = (0..cfg.tokens_per_doc)
                .map(|_| words[rng.gen_range(0..words.len())].as_str())
                .collect();
            let input = tokenize(&vocab, &wrap_template(&text.join(" "), depth), DEFAULT_TRUNCATE_LENGTH)
                .expect("template is well formed");
            Example {
                input,
                targets: h.layer_targets(&labels),
            }
        })
        .collect();
    (h, Model { encoder, head }, batch)
}

fn term_weights(term: Term, cfg: &LossConfig) -> TermWeights {
    match term {
        Term::Classification => TermWeights { classification: 1.0, hcc: 0.0, fhc: 0.0 },
        Term::Hcc => TermWeights { classification: 0.0, hcc: cfg.lambda1, fhc: 0.0 },
        Term::Fhc => TermWeights { classification: 0.0, hcc: 0.0, fhc: cfg.lambda2 },
        Term::Total => TermWeights::from(cfg),
    }
}

const TERMS: [Term; 4] = [Term::Classification, Term::Hcc, Term::Fhc, Term::Total];

/// Checks one loss configuration; returns one row per (term, group).
pub fn check_config(
    h: &Hierarchy,
    model: &Model,
    batch: &[Example],
    loss: &LossConfig,
    cfg: &GradcheckConfig,
) -> Result<Vec<GradcheckRow>, ModelError> {
    let seed = cfg.seed;
    let eval = |m: &Model| -> Result<[f64; 4], ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, _) = m.loss_and_grad_weighted(batch, h, loss, TermWeights::from(loss), &mut rng)?;
        let c = b.classification;
        let hc = loss.lambda1 * b.hcc;
        let f = loss.lambda2 * b.fhc;
        Ok([c, hc, f, c + hc + f])
    };

    let mut analytic = Vec::new();
    for term in TERMS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, g) = model.loss_and_grad_weighted(batch, h, loss, term_weights(term, loss), &mut rng)?;
        analytic.push(g);
    }

    // Numeric gradients, flat in `params_mut` order, one vector per term.
    let mut numeric: Vec<Vec<f64>> = vec![Vec::new(); 4];
    let mut probe = model.clone();
    let tensor_count = probe.params_mut().len();
    for t in 0..tensor_count {
        let len = probe.params_mut()[t].1.len();
        for i in 0..len {
            let original = probe.params_mut()[t].1[i];
            probe.params_mut()[t].1[i] = original + cfg.step;
            let plus = eval(&probe)?;
            probe.params_mut()[t].1[i] = original - cfg.step;
            let minus = eval(&probe)?;
            probe.params_mut()[t].1[i] = original;
            for k in 0..4 {
                numeric[k].push((plus[k] - minus[k]) / (2.0 * cfg.step));
            }
        }
    }

    let groups: Vec<ParamGroup> = probe.params_mut().iter().map(|(g, s)| vec![*g; s.len()]).flatten().collect();
    let mut rows = Vec::new();
    for (k, term) in TERMS.iter().enumerate() {
        let flat: Vec<f64> = Model::grads_flat(&analytic[k]).into_iter().flatten().copied().collect();
        for group in ParamGroup::ALL {
            let mut max_rel: f64 = 0.0;
            let mut max_abs: f64 = 0.0;
            let mut all_zero = true;
            let mut count = 0;
            for ((a, n), g) in flat.iter().zip(&numeric[k]).zip(&groups) {
                if *g != group {
                    continue;
                }
                count += 1;
                all_zero &= *a == 0.0 && *n == 0.0;
                max_abs = max_abs.max(a.abs());
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(cfg.rel_floor);
                max_rel = max_rel.max(rel);
            }
            rows.push(GradcheckRow {
                mode: loss.mode,
                fhc_variant: loss.fhc_variant,
                hcc_source: loss.hcc_source,
                term: *term,
                group,
                params: count,
                max_rel_error: max_rel,
                max_abs_analytic: max_abs,
                all_zero,
                passed: max_rel <= cfg.tolerance && max_rel.is_finite(),
            });
        }
    }
    Ok(rows)
}

/// Runs every `{mode} x {fhc_variant} x {hcc_source}` combination.
pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport, ModelError> {
    let mut rows = Vec::new();
    for mode in [Mode::SinglePath, Mode::MultiPath] {
        let (h, model, batch) = random_setup(cfg, mode);
        for fhc_variant in [FhcVariant::AsWritten, FhcVariant::Infonce] {
            for hcc_source in [HccSource::Raw, HccSource::Recursive] {
                let loss = LossConfig {
                    lambda1: cfg.lambda1,
                    lambda2: cfg.lambda2,
                    alpha: cfg.alpha,
                    beta: cfg.beta,
                    mode,
                    fhc_variant,
                    hcc_source,
                    fhc_include_self: true,
                    tau: cfg.tau,
                };
                rows.extend(check_config(&h, &model, &batch, &loss, cfg)?);
            }
        }
    }
    Ok(GradcheckReport {
        step: cfg.step,
        tolerance: cfg.tolerance,
        rows,
    })
}
