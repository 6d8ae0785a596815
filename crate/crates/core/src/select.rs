//! Dual-network acquisition subsampling: a scorer assigns importance to
//! the direction-level DW measurements, a predictor reconstructs the full
//! measurement vector from the highest-scoring subset, and the averaged
//! scores yield a reduced b-value protocol.
//!
//! Both networks train jointly against the reconstruction MSE of the
//! input itself; no parameter labels are involved. The scorer gates each
//! selected measurement multiplicatively by its score; the hard top-k
//! mask is treated as constant during backprop (straight-through).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::acquisition::{AcquisitionScheme, VoxelTable};
use crate::error::{Error, Result};
use crate::fit::{FitParams, FitResult};
use crate::nn::{Activation, AdamConfig, AdamState, LayerSpec, Mlp};
use crate::stats::pearson;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SelectionConfig {
    /// Measurements kept by the hard gate.
    pub k_selected: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub dropout_p: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Subjects held out from the end of the dataset list for the test
    /// reconstruction MSE; 0 evaluates on the training set (warned).
    pub n_holdout: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            k_selected: 12,
            epochs: 100,
            learning_rate: 1e-5,
            dropout_p: 0.1,
            batch_size: 128,
            seed: 0,
            n_holdout: 1,
        }
    }
}

/// Importance scores and the derived reduced protocol.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ScoreReport {
    /// Mean importance per measurement over all training voxels, in [0, 1].
    pub scores: Vec<f64>,
    /// Top-k measurement indices, ascending.
    pub selected: Vec<usize>,
    /// b-values (s/mm^2) of shells containing at least one selected
    /// measurement, ascending.
    pub b_values: Vec<f64>,
    /// Mean scores per subject (all subjects, training first).
    pub per_subject: Vec<Vec<f64>>,
    /// Reconstruction MSE on held-out subjects (or on the training set
    /// when there is no holdout; see warnings).
    pub test_mse: f64,
    pub seed: u64,
    pub config: SelectionConfig,
    pub warnings: Vec<String>,
}

/// Indices of the k largest scores; equal scores break toward the lower
/// index. Returned ascending.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut sel = idx[..k.min(scores.len())].to_vec();
    sel.sort_unstable();
    sel
}

/// Zeroes every entry outside `selected` (the hard part of the gate).
pub fn hard_mask(x: &[f64], selected: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for &i in selected {
        out[i] = x[i];
    }
    out
}

fn scorer_net(n_meas: usize, cfg: &SelectionConfig) -> Mlp {
    Mlp::from_specs(
        &[
            LayerSpec {
                in_dim: n_meas,
                out_dim: 64,
                activation: Activation::Relu,
                batchnorm: true,
            },
            LayerSpec {
                in_dim: 64,
                out_dim: n_meas,
                activation: Activation::Sigmoid,
                batchnorm: false,
            },
        ],
        cfg.dropout_p,
        cfg.seed,
    )
}

fn predictor_net(k: usize, n_meas: usize, cfg: &SelectionConfig) -> Mlp {
    Mlp::from_specs(
        &[
            LayerSpec {
                in_dim: k,
                out_dim: 64,
                activation: Activation::Relu,
                batchnorm: false,
            },
            LayerSpec {
                in_dim: 64,
                out_dim: n_meas,
                activation: Activation::Linear,
                batchnorm: false,
            },
        ],
        cfg.dropout_p,
        cfg.seed.wrapping_add(1),
    )
}

/// Eval-mode reconstruction MSE of the gated pipeline over a set of rows.
fn reconstruction_mse(
    scorer: &Mlp,
    predictor: &Mlp,
    rows: &[&[f64]],
    k: usize,
    n_meas: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for row in rows {
        let scores = scorer.forward_eval(row, 1)?;
        let selected = top_k_indices(&scores, k);
        let mut p_in = Vec::with_capacity(k);
        for &i in &selected {
            p_in.push(row[i] * scores[i]);
        }
        let recon = predictor.forward_eval(&p_in, 1)?;
        total += recon
            .iter()
            .zip(row.iter())
            .map(|(r, x)| (r - x) * (r - x))
            .sum::<f64>()
            / n_meas as f64;
    }
    Ok(total / rows.len() as f64)
}

/// Trains the scorer/predictor pair on direction-level tables (one per
/// subject) and reports averaged importance scores, the selected subset,
/// and held-out reconstruction error.
pub fn train_selector(
    datasets: &[VoxelTable],
    scheme: &AcquisitionScheme,
    cfg: &SelectionConfig,
) -> Result<ScoreReport> {
    let n_meas = scheme.n_dw();
    if datasets.is_empty() {
        return Err(Error::Input("need at least one training subject".into()));
    }
    for (i, t) in datasets.iter().enumerate() {
        if t.n_meas != n_meas {
            return Err(Error::Shape(format!(
                "subject {} has {} measurements, scheme has {} DW measurements",
                i, t.n_meas, n_meas
            )));
        }
    }
    if cfg.epochs == 0 || cfg.k_selected == 0 {
        return Err(Error::Input("epochs and k_selected must be >= 1".into()));
    }
    if cfg.n_holdout >= datasets.len() && datasets.len() > 1 {
        return Err(Error::Input(format!(
            "holdout of {} leaves no training subjects (have {})",
            cfg.n_holdout,
            datasets.len()
        )));
    }

    let mut warnings = Vec::new();
    let k = if cfg.k_selected >= n_meas {
        if cfg.k_selected > n_meas {
            warnings.push(format!(
                "k_selected = {} exceeds the {} measurements; selection degenerates to identity gating",
                cfg.k_selected, n_meas
            ));
        }
        n_meas
    } else {
        cfg.k_selected
    };
    let n_holdout = cfg.n_holdout.min(datasets.len().saturating_sub(1));
    let n_train = datasets.len() - n_holdout;
    if n_holdout == 0 {
        warnings.push(
            "no held-out subjects; test_mse is evaluated on the training set".to_string(),
        );
    }

    let train_rows: Vec<&[f64]> = datasets[..n_train].iter().flat_map(|t| t.rows()).collect();
    let test_rows: Vec<&[f64]> = if n_holdout > 0 {
        datasets[n_train..].iter().flat_map(|t| t.rows()).collect()
    } else {
        train_rows.clone()
    };

    let mut scorer = scorer_net(n_meas, cfg);
    let mut predictor = predictor_net(k, n_meas, cfg);
    let mut adam_s = AdamState::for_net(&scorer, AdamConfig::with_lr(cfg.learning_rate));
    let mut adam_p = AdamState::for_net(&predictor, AdamConfig::with_lr(cfg.learning_rate));

    let batch_size = cfg.batch_size.max(1);
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_rows.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(1 + epoch as u64);
        order.shuffle(&mut shuffle_rng);

        for chunk in order.chunks(batch_size) {
            let batch = chunk.len();
            let mut x = Vec::with_capacity(batch * n_meas);
            for &r in chunk {
                x.extend_from_slice(train_rows[r]);
            }
            let mut rng_s = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng_s.set_stream(u64::MAX / 2 + 2 * step);
            let mut rng_p = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng_p.set_stream(u64::MAX / 2 + 2 * step + 1);
            step += 1;

            let s_cache = scorer.forward_train(&x, batch, &mut rng_s)?;
            let scores = s_cache.output();

            // Per-sample hard top-k gate, then compact the selected
            // entries (ascending index) into the predictor input.
            let mut selected_per_sample = Vec::with_capacity(batch);
            let mut p_in = Vec::with_capacity(batch * k);
            for s in 0..batch {
                let srow = &scores[s * n_meas..(s + 1) * n_meas];
                let xrow = &x[s * n_meas..(s + 1) * n_meas];
                let sel = top_k_indices(srow, k);
                for &i in &sel {
                    p_in.push(xrow[i] * srow[i]);
                }
                selected_per_sample.push(sel);
            }

            let p_cache = predictor.forward_train(&p_in, batch, &mut rng_p)?;
            let recon = p_cache.output();

            let scale = 2.0 / (batch * n_meas) as f64;
            let d_recon: Vec<f64> = recon
                .iter()
                .zip(&x)
                .map(|(r, t)| (r - t) * scale)
                .collect();
            let grads_p = predictor.backward(&p_cache, &d_recon)?;

            // Straight-through: route the predictor's input gradient to
            // the scores of the selected entries only.
            let mut d_scores = vec![0.0; batch * n_meas];
            for s in 0..batch {
                let sel = &selected_per_sample[s];
                let xrow = &x[s * n_meas..(s + 1) * n_meas];
                for (j, &i) in sel.iter().enumerate() {
                    d_scores[s * n_meas + i] = grads_p.d_input[s * k + j] * xrow[i];
                }
            }
            let grads_s = scorer.backward(&s_cache, &d_scores)?;

            adam_p.step(&mut predictor.params_mut(), &grads_p.tensors);
            adam_s.step(&mut scorer.params_mut(), &grads_s.tensors);
        }
    }

    // Mean eval-mode scores over all training voxels (jointly over
    // subjects), plus a per-subject matrix over every subject.
    let mut mean_scores = vec![0.0; n_meas];
    for row in &train_rows {
        let s = scorer.forward_eval(row, 1)?;
        for (m, v) in mean_scores.iter_mut().zip(&s) {
            *m += v;
        }
    }
    for m in mean_scores.iter_mut() {
        *m /= train_rows.len() as f64;
    }

    let mut per_subject = Vec::with_capacity(datasets.len());
    for t in datasets {
        let mut subj = vec![0.0; n_meas];
        for row in t.rows() {
            let s = scorer.forward_eval(row, 1)?;
            for (m, v) in subj.iter_mut().zip(&s) {
                *m += v;
            }
        }
        for m in subj.iter_mut() {
            *m /= t.n_voxels as f64;
        }
        per_subject.push(subj);
    }

    let selected = top_k_indices(&mean_scores, k);
    let b_values = shells_of_measurements(scheme, &selected);
    let test_mse = reconstruction_mse(&scorer, &predictor, &test_rows, k, n_meas)?;

    Ok(ScoreReport {
        scores: mean_scores,
        selected,
        b_values,
        per_subject,
        test_mse,
        seed: cfg.seed,
        config: cfg.clone(),
        warnings,
    })
}

/// Ascending b-values (s/mm^2) of the shells containing the given DW
/// measurement indices.
fn shells_of_measurements(scheme: &AcquisitionScheme, measurements: &[usize]) -> Vec<f64> {
    let shells = scheme.shells();
    // DW measurement index -> shell position.
    let mut shell_of = Vec::with_capacity(scheme.n_dw());
    for (si, shell) in shells.iter().enumerate() {
        for _ in &shell.dw_indices {
            shell_of.push(si);
        }
    }
    let mut hit: Vec<bool> = vec![false; shells.len()];
    for &m in measurements {
        hit[shell_of[m]] = true;
    }
    let mut bs: Vec<f64> = shells
        .iter()
        .zip(&hit)
        .filter(|(_, &h)| h)
        .map(|(s, _)| s.b * 1e3)
        .collect();
    bs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    bs
}

/// Reduces the full scheme to the `n_bvalues` highest-scoring shells
/// (shell score = mean of its direction scores; ties break toward the
/// lower shell index). Retained shells keep all directions and their
/// TE-matched b0s in the original order.
pub fn extract_protocol(
    report: &ScoreReport,
    full: &AcquisitionScheme,
    n_bvalues: usize,
) -> Result<AcquisitionScheme> {
    let shells = full.shells();
    if report.scores.len() != full.n_dw() {
        return Err(Error::Shape(format!(
            "report has {} scores, scheme has {} DW measurements",
            report.scores.len(),
            full.n_dw()
        )));
    }
    if n_bvalues >= shells.len() {
        return Ok(full.clone());
    }
    // Shell score = mean score of its direction measurements; the scores
    // vector is indexed by DW position in scheme order.
    let mut pos = 0usize;
    let mut shell_scores = Vec::with_capacity(shells.len());
    for shell in &shells {
        let n = shell.dw_indices.len();
        let mean = report.scores[pos..pos + n].iter().sum::<f64>() / n as f64;
        shell_scores.push(mean);
        pos += n;
    }
    let keep_idx = top_k_indices(&shell_scores, n_bvalues);
    let keep_b: Vec<f64> = keep_idx.iter().map(|&i| shells[i].b * 1e3).collect();
    full.restrict_to_b_values(&keep_b)
}

/// Per-parameter agreement between a full-protocol fit and a
/// reduced-protocol fit of the same voxels.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ParamComparison {
    pub pearson_r: f64,
    pub mean_abs_diff: f64,
    /// Per-voxel reduced-minus-full differences.
    pub diffs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ReducedComparison {
    pub per_param: BTreeMap<String, ParamComparison>,
}

/// Compares two tissue-parameter fits voxel by voxel.
pub fn evaluate_reduced(full: &FitResult, reduced: &FitResult) -> Result<ReducedComparison> {
    if full.voxel_indices != reduced.voxel_indices {
        return Err(Error::Input(
            "full and reduced fits cover different voxel sets".into(),
        ));
    }
    let (FitParams::Verdict(_), FitParams::Verdict(_)) = (&full.params, &reduced.params) else {
        return Err(Error::Input(
            "reduced-protocol comparison needs two tissue-model fits".into(),
        ));
    };
    let mut per_param = BTreeMap::new();
    for &name in full.param_names() {
        let a: Vec<f64> = (0..full.n_voxels())
            .map(|v| full.param_value(v, name).expect("tissue params are total"))
            .collect();
        let b: Vec<f64> = (0..reduced.n_voxels())
            .map(|v| reduced.param_value(v, name).expect("tissue params are total"))
            .collect();
        let diffs: Vec<f64> = b.iter().zip(&a).map(|(x, y)| x - y).collect();
        let mean_abs_diff = diffs.iter().map(|d| d.abs()).sum::<f64>() / diffs.len() as f64;
        let pearson_r = if a == b {
            1.0
        } else {
            pearson(&a, &b)?
        };
        per_param.insert(
            name.to_string(),
            ParamComparison {
                pearson_r,
                mean_abs_diff,
                diffs,
            },
        );
    }
    Ok(ReducedComparison { per_param })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::{kidney_protocol, table_normalize_directions};
    use crate::phantom::{generate_phantom, PhantomSpec};
    use crate::signal::TissueParams;

    fn paper_fixture_report(scheme: &AcquisitionScheme) -> ScoreReport {
        // Scores favouring the 70/150/1000/2000 shells.
        let shells = scheme.shells();
        let mut scores = Vec::new();
        for shell in &shells {
            let b = shell.b * 1e3;
            let s = if [70.0, 150.0, 1000.0, 2000.0].contains(&b) {
                0.9
            } else {
                0.2
            };
            for _ in &shell.dw_indices {
                scores.push(s);
            }
        }
        let selected = top_k_indices(&scores, 12);
        let b_values = shells_of_measurements(scheme, &selected);
        ScoreReport {
            scores,
            selected,
            b_values,
            per_subject: vec![],
            test_mse: 0.0,
            seed: 0,
            config: SelectionConfig::default(),
            warnings: vec![],
        }
    }

    #[test]
    fn fixture_scores_yield_published_reduced_protocol() {
        let scheme = kidney_protocol();
        let report = paper_fixture_report(&scheme);
        assert_eq!(report.b_values, vec![70.0, 150.0, 1000.0, 2000.0]);
        let reduced = extract_protocol(&report, &scheme, 4).unwrap();
        let bs: Vec<f64> = reduced.shells().iter().map(|s| s.b * 1e3).collect();
        assert_eq!(bs, vec![70.0, 150.0, 1000.0, 2000.0]);
        assert_eq!(reduced.n_image_volumes(), 8);
    }

    #[test]
    fn uniform_scores_break_ties_toward_lower_shells() {
        let scheme = kidney_protocol();
        let mut report = paper_fixture_report(&scheme);
        report.scores = vec![0.5; 27];
        let reduced = extract_protocol(&report, &scheme, 4).unwrap();
        let bs: Vec<f64> = reduced.shells().iter().map(|s| s.b * 1e3).collect();
        assert_eq!(bs, vec![70.0, 90.0, 150.0, 500.0]);
    }

    #[test]
    fn full_shell_count_returns_scheme_unchanged() {
        let scheme = kidney_protocol();
        let report = paper_fixture_report(&scheme);
        let same = extract_protocol(&report, &scheme, 9).unwrap();
        assert_eq!(same, scheme);
    }

    #[test]
    fn hard_mask_is_idempotent() {
        let x = vec![0.3, 0.8, 0.1, 0.9, 0.4];
        let sel = vec![1, 3];
        let once = hard_mask(&x, &sel);
        let twice = hard_mask(&once, &sel);
        assert_eq!(once, twice);
        assert_eq!(once, vec![0.0, 0.8, 0.0, 0.9, 0.0]);
    }

    #[test]
    fn top_k_breaks_ties_by_lower_index() {
        let scores = vec![0.5, 0.9, 0.5, 0.9, 0.1];
        assert_eq!(top_k_indices(&scores, 3), vec![0, 1, 3]);
    }

    fn planted_subjects(n_subjects: usize, seed: u64) -> (Vec<VoxelTable>, AcquisitionScheme) {
        let scheme = kidney_protocol();
        let shells = scheme.shells();
        let planted: Vec<bool> = shells
            .iter()
            .map(|s| [70.0, 150.0, 1000.0, 2000.0].contains(&(s.b * 1e3)))
            .collect();
        let mut out = Vec::new();
        for s in 0..n_subjects {
            let spec = PhantomSpec {
                n_voxels: 400,
                planted_shells: Some(planted.clone()),
                snr: Some(60.0),
                seed: seed.wrapping_mul(1000).wrapping_add(s as u64),
                ..Default::default()
            };
            let (raw, _) = generate_phantom(&spec, &scheme).unwrap();
            let (table, _) = table_normalize_directions(&raw, &scheme).unwrap();
            out.push(table);
        }
        (out, scheme)
    }

    #[test]
    fn selector_is_deterministic() {
        let (subjects, scheme) = planted_subjects(2, 3);
        let cfg = SelectionConfig {
            epochs: 3,
            ..Default::default()
        };
        let a = train_selector(&subjects, &scheme, &cfg).unwrap();
        let b = train_selector(&subjects, &scheme, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn selector_scores_stay_in_unit_interval() {
        let (subjects, scheme) = planted_subjects(2, 5);
        let cfg = SelectionConfig {
            epochs: 5,
            ..Default::default()
        };
        let r = train_selector(&subjects, &scheme, &cfg).unwrap();
        assert!(r.scores.iter().all(|s| (0.0..=1.0).contains(s)));
        assert_eq!(r.scores.len(), 27);
        assert_eq!(r.selected.len(), 12);
        assert!(r.b_values.iter().all(|b| *b >= 70.0 && *b <= 2500.0));
    }

    #[test]
    fn selector_rejects_bad_inputs() {
        let (subjects, scheme) = planted_subjects(1, 1);
        let bad_cfg = SelectionConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(train_selector(&subjects, &scheme, &bad_cfg).is_err());
        assert!(train_selector(&[], &scheme, &SelectionConfig::default()).is_err());

        // Wrong measurement count.
        let spec = PhantomSpec {
            n_voxels: 10,
            ..Default::default()
        };
        let (raw, _) = generate_phantom(&spec, &scheme).unwrap();
        assert!(train_selector(&[raw], &scheme, &SelectionConfig::default()).is_err());
    }

    #[test]
    fn no_holdout_single_subject_warns() {
        let (subjects, scheme) = planted_subjects(1, 7);
        let cfg = SelectionConfig {
            epochs: 2,
            n_holdout: 0,
            ..Default::default()
        };
        let r = train_selector(&subjects, &scheme, &cfg).unwrap();
        assert!(!r.warnings.is_empty());
    }

    #[test]
    fn oversized_k_degenerates_to_identity_gating() {
        let (subjects, scheme) = planted_subjects(2, 9);
        let cfg = SelectionConfig {
            k_selected: 30,
            epochs: 2,
            ..Default::default()
        };
        let r = train_selector(&subjects, &scheme, &cfg).unwrap();
        assert_eq!(r.selected.len(), 27);
        assert!(r.warnings.iter().any(|w| w.contains("identity")));
    }

    #[test]
    fn evaluate_reduced_identity_and_anticorrelation() {
        use crate::fit::ModelKind;
        let params: Vec<TissueParams> = (0..5)
            .map(|i| TissueParams::new(0.1 * i as f64, 0.1, 5.0 + i as f64))
            .collect();
        let fit = FitResult {
            model: ModelKind::Verdict,
            params: FitParams::Verdict(params.clone()),
            mse: vec![0.0; 5],
            voxel_indices: (0..5).collect(),
            dims: (5, 1, 1),
            diagnostics: None,
        };
        let same = evaluate_reduced(&fit, &fit).unwrap();
        for (_, c) in &same.per_param {
            assert_eq!(c.pearson_r, 1.0);
            assert_eq!(c.mean_abs_diff, 0.0);
        }

        // Anti-correlated f_ic map.
        let anti: Vec<TissueParams> = (0..5)
            .map(|i| TissueParams::new(0.1 * (4 - i) as f64, 0.1, 5.0 + i as f64))
            .collect();
        let fit2 = FitResult {
            model: ModelKind::Verdict,
            params: FitParams::Verdict(anti),
            mse: vec![0.0; 5],
            voxel_indices: (0..5).collect(),
            dims: (5, 1, 1),
            diagnostics: None,
        };
        let cmp = evaluate_reduced(&fit, &fit2).unwrap();
        assert!((cmp.per_param["f_ic"].pearson_r + 1.0).abs() < 1e-12);

        let fit3 = FitResult {
            voxel_indices: (1..6).collect(),
            ..fit2.clone()
        };
        assert!(evaluate_reduced(&fit, &fit3).is_err());
    }
}
