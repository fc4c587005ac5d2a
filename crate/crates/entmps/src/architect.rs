//! Entanglement-guided architecture optimization: reorder the site path so
//! SEE is non-ascending, truncate the chain where BEE falls below a fraction
//! of `ln D`, and retrain. The complexity ratio `xi = L~ / L` measures how
//! much of the chain survives.

use thiserror::Error;

use crate::data::{LinearizedSet, SitePath};
use crate::entropy::{profile, EntropyError};
use crate::feature::{encode_dataset, FeatureConfig, FeatureError};
use crate::model::{ModelError, MpsClassifier};
use crate::trainer::{accuracy, train, TrainConfig, TrainError, TrainHistory};

#[derive(Debug, Error)]
pub enum ArchitectError {
    #[error("invalid pipeline config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// BEE threshold fraction: truncate where BEE stays below `c * ln D`.
    pub c: f64,
    /// Tolerated SEE inversion when testing for descending order, in nats.
    pub slack: f64,
    /// Maximum reorder-retrain loops.
    pub max_loops: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            c: 0.75,
            slack: 0.05,
            max_loops: 2,
        }
    }
}

/// Everything the pipeline needs to train one classifier stage.
pub struct PipelineInputs<'a> {
    pub train: &'a LinearizedSet,
    pub test: &'a LinearizedSet,
    pub initial_path: SitePath,
    pub feature: FeatureConfig,
    pub chi: usize,
    pub label_dim: usize,
    pub train_cfg: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub initial_path: SitePath,
    pub final_path: SitePath,
    pub see_before: Vec<f64>,
    pub see_after: Vec<f64>,
    pub bee_before: Vec<f64>,
    pub bee_after: Vec<f64>,
    /// Truncation length found on the final (path-optimized) model.
    pub l_tilde: usize,
    /// `l_tilde / L`, exactly.
    pub xi: f64,
    /// Truncation ratio the initial-path model alone would give.
    pub xi_initial: f64,
    /// Test accuracy per stage, in execution order.
    pub accuracies: Vec<(String, f64)>,
    /// Reorder-retrain loops actually executed.
    pub iterations: usize,
    /// True when the loop budget ran out before SEE became descending.
    pub loops_exhausted: bool,
}

/// Whole pipeline output: the final truncated classifier plus every
/// intermediate stage model for inspection.
pub struct PipelineOutcome {
    pub model: MpsClassifier,
    pub report: PipelineReport,
    pub stage_models: Vec<(String, MpsClassifier)>,
    pub stage_histories: Vec<(String, TrainHistory)>,
}

/// Indices `0..n` sorted by non-ascending value, ties keeping the original
/// position order (stable).
pub fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).expect("finite entropies"));
    idx
}

/// New path visiting sites in non-ascending SEE order.
pub fn reorder_by_see(path: &SitePath, see: &[f64]) -> SitePath {
    assert_eq!(path.len(), see.len(), "path and SEE lengths differ");
    let perm = descending_order(see);
    let order: Vec<usize> = perm.iter().map(|&p| path.order()[p]).collect();
    SitePath::new(order).expect("permuting an injective path keeps it injective")
}

/// True when `see[l + 1] <= see[l] + slack` for every adjacent pair.
pub fn is_descending(see: &[f64], slack: f64) -> bool {
    assert!(slack >= 0.0);
    see.windows(2).all(|w| w[1] <= w[0] + slack)
}

/// Smallest `L~` such that every cut at or after the `L~`-th site (1-based)
/// has BEE below `c * ln D`; returns `L` when even the last cut is at or
/// above the threshold. `bee` has `L - 1` entries, cut `i` (0-based) sitting
/// between sites `i` and `i + 1`.
pub fn find_truncation(bee: &[f64], label_dim: usize, c: f64) -> usize {
    assert!(c > 0.0 && c < 1.0, "threshold fraction must be in (0, 1)");
    let threshold = c * (label_dim as f64).ln();
    match bee.iter().rposition(|&b| b >= threshold) {
        Some(i) => i + 2,
        None => 1,
    }
}

fn stage_seed(master: u64, k: u64) -> u64 {
    master.wrapping_add(k.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Table-style pipeline: train on the initial path, reorder by SEE and
/// retrain until the SEE profile is acceptably descending (or the loop budget
/// runs out), then truncate where BEE stays below `c * ln D` and train the
/// short classifier on the труncated data.
pub fn run_pipeline(
    inputs: &PipelineInputs<'_>,
    cfg: &PipelineConfig,
) -> Result<PipelineOutcome, ArchitectError> {
    if !(cfg.c > 0.0 && cfg.c < 1.0) {
        return Err(ArchitectError::BadConfig(format!(
            "c must be in (0, 1), got {}",
            cfg.c
        )));
    }
    if !(cfg.slack >= 0.0) {
        return Err(ArchitectError::BadConfig("slack must be >= 0".into()));
    }
    let l_full = inputs.train.n_sites;
    if inputs.initial_path.len() != l_full {
        return Err(ArchitectError::BadConfig(format!(
            "initial path has {} entries for {l_full} sites",
            inputs.initial_path.len()
        )));
    }

    let mut stage_models = Vec::new();
    let mut stage_histories = Vec::new();
    let mut accuracies = Vec::new();

    let mut train_data = inputs.train.clone();
    let mut test_data = inputs.test.clone();
    let mut path = inputs.initial_path.clone();

    let run_stage = |name: &str,
                     train_data: &LinearizedSet,
                     test_data: &LinearizedSet,
                     path: &SitePath,
                     seed: u64|
     -> Result<(MpsClassifier, TrainHistory, f64), ArchitectError> {
        let enc_train = encode_dataset(train_data, &inputs.feature)?;
        let enc_test = encode_dataset(test_data, &inputs.feature)?;
        let mut mps = MpsClassifier::init_random(
            path.clone(),
            inputs.feature.d,
            inputs.chi,
            inputs.label_dim,
            seed,
        )?;
        let mut cfg = inputs.train_cfg.clone();
        cfg.seed = seed;
        let history = train(&mut mps, &enc_train, Some(&enc_test), &cfg)?;
        let acc = accuracy(&mps, &enc_test)?;
        let _ = name;
        Ok((mps, history, acc))
    };

    // Step 1: train on the initial path
    let master = inputs.train_cfg.seed;
    let (model, history, acc) = run_stage("initial", &train_data, &test_data, &path, master)?;
    let prof = profile(&model)?;
    let see_before = prof.see.clone();
    let bee_before = prof.bee.clone();
    let xi_initial = find_truncation(&bee_before, inputs.label_dim, cfg.c) as f64 / l_full as f64;
    accuracies.push(("initial".to_string(), acc));
    stage_histories.push(("initial".to_string(), history));
    stage_models.push(("initial".to_string(), model));

    // Steps 2-4: reorder by SEE, retrain, re-check
    let mut current_see = see_before.clone();
    let mut current_bee = bee_before.clone();
    let mut iterations = 0usize;
    let mut loops_exhausted = false;
    while iterations < cfg.max_loops {
        let perm = descending_order(&current_see);
        path = reorder_by_see(&path, &current_see);
        train_data = train_data.permute_sites(&perm);
        test_data = test_data.permute_sites(&perm);
        iterations += 1;
        let name = format!("reordered_{iterations}");
        let (model, history, acc) =
            run_stage(&name, &train_data, &test_data, &path, stage_seed(master, iterations as u64))?;
        let prof = profile(&model)?;
        current_see = prof.see;
        current_bee = prof.bee;
        accuracies.push((name.clone(), acc));
        stage_histories.push((name.clone(), history));
        stage_models.push((name, model));
        if is_descending(&current_see, cfg.slack) {
            break;
        }
        if iterations == cfg.max_loops {
            loops_exhausted = true;
        }
    }

    // Step 5: truncate where BEE stays below the threshold and retrain
    let l_tilde = find_truncation(&current_bee, inputs.label_dim, cfg.c);
    let xi = l_tilde as f64 / l_full as f64;
    let keep = l_tilde.max(2); // an MPS needs at least two sites
    let trunc_train = train_data.truncate_sites(keep);
    let trunc_test = test_data.truncate_sites(keep);
    let trunc_path = path.prefix(keep);
    let (final_model, final_history, final_acc) = run_stage(
        "truncated",
        &trunc_train,
        &trunc_test,
        &trunc_path,
        stage_seed(master, 9999),
    )?;
    accuracies.push(("truncated".to_string(), final_acc));
    stage_histories.push(("truncated".to_string(), final_history));

    let report = PipelineReport {
        initial_path: inputs.initial_path.clone(),
        final_path: path,
        see_before,
        see_after: current_see,
        bee_before,
        bee_after: current_bee,
        l_tilde,
        xi,
        xi_initial,
        accuracies,
        iterations,
        loops_exhausted,
    };
    Ok(PipelineOutcome {
        model: final_model,
        report,
        stage_models,
        stage_histories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn reorder_keeps_descending_input() {
        let path = SitePath::identity(4);
        let see = [0.9, 0.5, 0.3, 0.1];
        assert_eq!(reorder_by_see(&path, &see).order(), &[0, 1, 2, 3]);
    }

    #[test]
    fn reorder_sorts_by_value() {
        let path = SitePath::identity(3);
        let see = [0.1, 0.9, 0.5];
        assert_eq!(reorder_by_see(&path, &see).order(), &[1, 2, 0]);
    }

    #[test]
    fn reorder_moves_pure_middle_qubit_last() {
        // three-qubit example: SEE = (ln 2, 0, ln 2)
        let path = SitePath::identity(3);
        let see = [LN2, 0.0, LN2];
        assert_eq!(reorder_by_see(&path, &see).order(), &[0, 2, 1]);
    }

    #[test]
    fn reorder_is_stable_and_idempotent_on_ordering() {
        let path = SitePath::identity(5);
        let see = [0.5, 0.7, 0.5, 0.2, 0.7];
        let perm = descending_order(&see);
        assert_eq!(perm, vec![1, 4, 0, 2, 3]);
        let new_path = reorder_by_see(&path, &see);
        assert!(new_path.is_bijection());
        // re-sorting the permuted SEE changes nothing
        let permuted_see: Vec<f64> = perm.iter().map(|&p| see[p]).collect();
        let again = reorder_by_see(&new_path, &permuted_see);
        assert_eq!(again, new_path);
    }

    #[test]
    fn is_descending_cases() {
        assert!(is_descending(&[0.9, 0.5, 0.1], 0.0));
        assert!(!is_descending(&[0.5, 0.8, 0.1], 0.05));
        assert!(is_descending(&[0.5, 0.52, 0.1], 0.05));
        assert!(is_descending(&[], 0.0));
        assert!(is_descending(&[1.0], 0.0));
    }

    #[test]
    fn find_truncation_examples() {
        // all-zero BEE: keep a single site
        assert_eq!(find_truncation(&[0.0; 10], 2, 0.75), 1);

        // above threshold up to 1-based cut 85, below after
        let mut bee = vec![0.0f64; 783];
        for b in bee.iter_mut().take(85) {
            *b = 0.6;
        }
        for b in bee.iter_mut().skip(85) {
            *b = 0.4;
        }
        let l_tilde = find_truncation(&bee, 2, 0.75);
        assert_eq!(l_tilde, 86);
        assert!((l_tilde as f64 / 784.0 - 0.11).abs() < 0.001);

        // above threshold everywhere: nothing can be cut
        assert_eq!(find_truncation(&[0.69; 7], 2, 0.75), 8);
    }

    #[test]
    fn find_truncation_is_monotone_in_c() {
        let mut state = 3u64;
        let mut rng = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..50 {
            let bee: Vec<f64> = (0..20).map(|_| rng() * LN2).collect();
            let mut prev = usize::MAX;
            for c in [0.1, 0.3, 0.5, 0.75, 0.9] {
                let lt = find_truncation(&bee, 2, c);
                assert!(lt <= prev, "L~ must not grow with c");
                prev = lt;
            }
        }
    }

    #[test]
    fn pipeline_truncates_a_pure_noise_feature() {
        use crate::data::LinearizedSet;

        // eight features; column 3 is pure noise, the rest track the label
        let l_sites = 8;
        let noise_col = 3usize;
        let n = 160;
        let mut state = 424242u64;
        let mut rng = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let mut values = Vec::with_capacity(n * l_sites);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = (i % 2) as u8;
            for col in 0..l_sites {
                if col == noise_col {
                    values.push(rng());
                } else {
                    values.push(0.1 + 0.8 * f64::from(y) + 0.02 * (rng() - 0.5));
                }
            }
            labels.push(y);
        }
        let split = n * 3 / 4;
        let train_set = LinearizedSet {
            values: values[..split * l_sites].to_vec(),
            labels: labels[..split].to_vec(),
            n_sites: l_sites,
        };
        let test_set = LinearizedSet {
            values: values[split * l_sites..].to_vec(),
            labels: labels[split..].to_vec(),
            n_sites: l_sites,
        };

        let inputs = PipelineInputs {
            train: &train_set,
            test: &test_set,
            initial_path: SitePath::identity(l_sites),
            feature: FeatureConfig::default(),
            chi: 4,
            label_dim: 2,
            train_cfg: TrainConfig {
                batch_size: split,
                sweeps_max: 8,
                conv_tol: 0.0,
                seed: 11,
                ..TrainConfig::default()
            },
        };
        let outcome = run_pipeline(&inputs, &PipelineConfig::default()).unwrap();
        let report = &outcome.report;

        assert!(report.final_path.is_bijection());
        assert_eq!(
            *report.final_path.order().last().unwrap(),
            noise_col,
            "noise feature should sort last; final path {:?}, SEE after {:?}",
            report.final_path.order(),
            report.see_after
        );
        assert!(
            report.l_tilde < l_sites,
            "noise feature should be truncated away (L~ = {})",
            report.l_tilde
        );
        assert!((report.xi - report.l_tilde as f64 / l_sites as f64).abs() == 0.0);

        let full_acc = report.accuracies.first().unwrap().1;
        let trunc_acc = report.accuracies.last().unwrap().1;
        assert!(
            (full_acc - trunc_acc).abs() <= 0.01 + 1e-12,
            "accuracy moved from {full_acc} to {trunc_acc}"
        );
        // the truncated model's path is the leading prefix of the final path
        let prefix: Vec<usize> =
            report.final_path.order()[..outcome.model.sites()].to_vec();
        assert_eq!(outcome.model.path().order(), prefix.as_slice());
    }

    #[test]
    fn pipeline_rejects_bad_config() {
        use crate::data::LinearizedSet;
        let set = LinearizedSet {
            values: vec![0.0; 8],
            labels: vec![0, 1],
            n_sites: 4,
        };
        let inputs = PipelineInputs {
            train: &set,
            test: &set,
            initial_path: SitePath::identity(4),
            feature: FeatureConfig::default(),
            chi: 2,
            label_dim: 2,
            train_cfg: TrainConfig::default(),
        };
        let bad = PipelineConfig {
            c: 1.0,
            ..PipelineConfig::default()
        };
        assert!(matches!(
            run_pipeline(&inputs, &bad),
            Err(ArchitectError::BadConfig(_))
        ));
    }
}
