//! End-to-end acceptance checks. Each test prints one PASS/FAIL line for its
//! criterion (written straight to stderr so it shows without --nocapture).
//!
//! The training criteria run four suites at reduced scale (see `SCALE`);
//! their runs persist under the cargo target tmpdir and are resumed on
//! later invocations.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use common::*;
use quantlab::config::KvConfig;
use quantlab::ground_truth::{calibrate_quantifier_model, canonical_ratios, enumerate_combinations, TaskLabels};
use quantlab::harness::metrics::baselines;
use quantlab::harness::train::quiet;
use quantlab::harness::{ensure_encoder, pretrain_config, run_suite, train, Dataset, Existing, SuiteName, SuiteResult, TrainConfig};
use quantlab::model::{Model, ModelVariant, Task};
use quantlab::numeric::ParamStore;
use quantlab::rng::seeded;
use quantlab::scene::dataset::UNSEEN_SPLITS;
use quantlab::scene::{
    build_dataset, build_unseen_dataset, held_out_combinations, plan_dataset, DatasetKind, ManifestEntry, SceneSpec, Split,
};
use quantlab::settings::{Settings, KEYS};

fn report(n: u32, name: &str, pass: bool, detail: &str) -> bool {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    writeln!(err, "criterion {n} [{verdict}] {name}: {detail}").unwrap();
    pass
}

fn defaults() -> Settings {
    Settings::from_kv(&KvConfig::default()).unwrap()
}

fn test_labels(entries: &[(ManifestEntry, SceneSpec)]) -> Vec<&TaskLabels> {
    entries.iter().filter(|(e, _)| e.split == Split::Test).map(|(e, _)| &e.labels).collect()
}

#[test]
fn combinatorics() {
    let counts: Vec<usize> = canonical_ratios().into_iter().map(|r| enumerate_combinations(r).len()).collect();
    let total: usize = counts.iter().sum();
    let (min, max) = (*counts.iter().min().unwrap(), *counts.iter().max().unwrap());
    let mean = total as f64 / counts.len() as f64;
    let pass = counts.len() == 17 && total == 97 && min == 2 && max == 18 && format!("{mean:.1}") == "5.7";
    assert!(report(1, "combinatorics", pass, &format!("{total} combinations over {} ratios, min {min}, max {max}, mean {mean:.2}", counts.len())));
}

#[test]
fn dataset_shape() {
    let s = defaults();
    let cfg = s.dataset_config().unwrap();
    let qm = calibrate_quantifier_model().unwrap();
    let std = plan_dataset(&cfg, DatasetKind::Standard, s.data_seed(), &qm).unwrap();
    let split_n = |v: &[(ManifestEntry, SceneSpec)], sp: Split| v.iter().filter(|(e, _)| e.split == sp).count();
    let sizes = [split_n(&std, Split::Train), split_n(&std, Split::Val), split_n(&std, Split::Test)];
    let mut per: BTreeMap<(Split, String), usize> = BTreeMap::new();
    for (e, _) in &std {
        *per.entry((e.split, e.ratio.clone())).or_default() += 1;
    }
    let expect = [700usize, 100, 200];
    let balanced = per.len() == 51
        && per.iter().all(|((sp, _), &n)| {
            let want = expect[Split::ALL.iter().position(|x| x == sp).unwrap()];
            n.abs_diff(want) <= 1
        });
    let std_ok = std.len() == 17_000 && sizes == [11_900, 1_700, 3_400] && balanced;

    let unseen = plan_dataset(&cfg, DatasetKind::Unseen, s.data_seed(), &qm).unwrap();
    let held = held_out_combinations(s.data_seed()).unwrap();
    let train_has_held = unseen
        .iter()
        .any(|(e, _)| e.split == Split::Train && held.contains(&e.combination()));
    let held_seen: usize = held
        .iter()
        .filter(|c| unseen.iter().any(|(e, _)| e.split != Split::Train && e.combination() == **c))
        .count();
    let n = unseen.len() as f64;
    let usizes = [split_n(&unseen, Split::Train), split_n(&unseen, Split::Val), split_n(&unseen, Split::Test)];
    let fractions_ok = usizes
        .iter()
        .zip(UNSEEN_SPLITS)
        .all(|(&k, f)| (k as f64 - f * n).abs() <= 17.0);
    let unseen_ok = (n - 14_000.0).abs() <= 140.0 && held.len() == 17 && held_seen == 17 && !train_has_held && fractions_ok;

    let detail = format!(
        "standard {} scenes {:?}, per-ratio balance {}; unseen {} scenes {:?}, {} held-out combinations, in train: {}",
        std.len(),
        sizes,
        if balanced { "exact" } else { "off" },
        unseen.len(),
        usizes,
        held.len(),
        train_has_held
    );
    assert!(report(2, "dataset shape", std_ok && unseen_ok, &detail));
}

#[test]
fn baselines_on_test_split() {
    let s = defaults();
    let qm = calibrate_quantifier_model().unwrap();
    let planned = plan_dataset(&s.dataset_config().unwrap(), DatasetKind::Standard, s.data_seed(), &qm).unwrap();
    let labels = test_labels(&planned);
    let set = baselines(Task::SetComp, &labels).unwrap();
    let prop = baselines(Task::PropTarg, &labels).unwrap();
    let num = baselines(Task::NTarg, &labels).unwrap();
    let pass = (set.majority - 0.470).abs() <= 0.005 && (prop.random - 0.058).abs() <= 0.01 && num.majority > 0.0;
    let detail = format!(
        "setComp majority {:.4}, propTarg random {:.4}, nTarg majority {:.4} ({} test scenes)",
        set.majority,
        prop.random,
        num.majority,
        labels.len()
    );
    assert!(report(3, "baselines", pass, &detail));
}

#[test]
fn quantifier_calibration() {
    let qm = calibrate_quantifier_model().unwrap();
    let ratios = canonical_ratios();
    let modal: Vec<f64> = ratios
        .iter()
        .map(|r| qm.distribution(r.proportion()).unwrap().iter().cloned().fold(0.0, f64::max))
        .collect();
    let mean = modal.iter().sum::<f64>() / modal.len() as f64;
    let none = qm.distribution(0.0).unwrap()[0];
    let all = qm.distribution(1.0).unwrap()[8];
    let pass = (0.50..=0.56).contains(&mean) && none >= 0.95 && all >= 0.95 && ratios.len() == 17;
    let detail = format!("mean max-probability {mean:.4}, P(none | 0) {none:.4}, P(all | 1) {all:.4}");
    assert!(report(4, "quantifier calibration", pass, &detail));
}

#[test]
fn gradient_correctness() {
    let (mut checked, mut redrawn, mut failures) = (0usize, 0usize, Vec::new());
    let mut rng = seeded(31);
    for trial in 0..6u64 {
        for (g, shape) in layer_cases(&mut rng) {
            let (c, f) = check_graph(&g, &shape, 500 + trial);
            checked += c;
            failures.extend(f.into_iter().map(|m| format!("{:?}: {m}", g.layers()[0].kind)));
        }
    }
    for seed in 0..3 {
        let (c, f) = check_graph(&toy_graph(), &[2, 4, 4, 1], seed);
        checked += c;
        failures.extend(f);
    }
    // summed loss, then each single-task loss as applied by the sequential update
    let configs: [[f64; 3]; 4] = [[1.0, 1.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for variant in [ModelVariant::MultiTaskProp, ModelVariant::MultiTaskNumber, ModelVariant::MultiTaskReversed] {
        for (i, w) in configs.iter().enumerate() {
            let r = multi_task_fd(variant, w, 40 + i as u64);
            checked += r.checked;
            redrawn += r.redrawn;
            failures.extend(r.failures.into_iter().map(|m| format!("{variant} {w:?}: {m}")));
        }
    }
    let detail = format!(
        "{} of {checked} finite-difference checks pass ({redrawn} model coordinates redrawn for a relu or max-pool kink inside the stencil)",
        checked - failures.len()
    );
    assert!(report(5, "gradient correctness", failures.is_empty(), &detail), "{failures:#?}");
}

fn stage_touched(ps: &ParamStore, prefix: &str) -> bool {
    ps.iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .any(|(_, p)| p.grad.data().iter().any(|&g| g != 0.0))
}

#[test]
fn sharing_ledger() {
    let mut violations = Vec::new();
    let mut checks = 0;
    for variant in [ModelVariant::MultiTaskProp, ModelVariant::MultiTaskNumber, ModelVariant::MultiTaskReversed] {
        let model = Model::build(variant, tiny()).unwrap();
        for seed in 0..3 {
            let mut params = model.init_params(&mut seeded(seed));
            lift_biases(&mut params, &mut seeded(seed + 100));
            let x = images(6, 20, seed + 10);
            let y = labels(6);
            for (k, task) in model.tasks.iter().enumerate() {
                let mut w = vec![0.0; 3];
                w[k] = 1.0;
                let g = grads(&model, &params, &x, &y, &w);
                for stage in 1..=3 {
                    let expected = stage <= k + 1;
                    checks += 1;
                    if stage_touched(&g, &format!("stage{stage}.")) != expected {
                        violations.push(format!("{variant}: {task} loss {} stage{stage}", if expected { "misses" } else { "reaches" }));
                    }
                }
            }
        }
    }
    let detail = format!("{checks} stage/loss pairs, {} violations (loss k reaches stages 1..=k only, exact zeros elsewhere)", violations.len());
    assert!(report(6, "sharing ledger", violations.is_empty(), &detail), "{violations:#?}");
}

/// Reduced scale for the training criteria (about 2.5 h on one core):
/// full-size data at 60 px with a narrower encoder and 10 epochs.
const SCALE: &str = "
image_size = 60
conv1 = 8
conv2 = 16
feature_dim = 32
epochs = 10
seeds = 1,2,3
";

fn scale_settings() -> Settings {
    let kv = KvConfig::parse(SCALE).unwrap();
    let s = Settings::from_kv(&kv).unwrap();
    let digest = s.restrict(&KEYS.iter().map(|k| k.key).collect::<Vec<_>>()).digest();
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("acceptance-{digest}"));
    let mut kv = kv;
    kv.set("data_dir", root.join("data").display().to_string());
    kv.set("run_dir", root.join("runs").display().to_string());
    Settings::from_kv(&kv).unwrap()
}

struct Prepared {
    settings: Settings,
    encoder: ParamStore,
}

fn prepared() -> &'static Prepared {
    static P: OnceLock<Prepared> = OnceLock::new();
    P.get_or_init(|| {
        let settings = scale_settings();
        let cfg = settings.dataset_config().unwrap();
        for kind in [DatasetKind::Standard, DatasetKind::Unseen] {
            let dir = settings.dataset_path(kind);
            if Dataset::load(&dir).is_err() {
                if dir.exists() {
                    std::fs::remove_dir_all(&dir).unwrap();
                }
                match kind {
                    DatasetKind::Standard => build_dataset(&cfg, settings.data_seed(), &dir),
                    DatasetKind::Unseen => build_unseen_dataset(&cfg, settings.data_seed(), &dir),
                }
                .unwrap();
            }
        }
        let encoder = ensure_encoder(&pretrain_config(&settings).unwrap(), &settings.encoder_path(), &quiet).unwrap();
        Prepared { settings, encoder }
    })
}

fn suites() -> &'static BTreeMap<SuiteName, SuiteResult> {
    static S: OnceLock<BTreeMap<SuiteName, SuiteResult>> = OnceLock::new();
    S.get_or_init(|| {
        let p = prepared();
        SuiteName::ALL
            .into_iter()
            .map(|name| (name, run_suite(name, &p.settings, Existing::Resume, &quiet).unwrap()))
            .collect()
    })
}

fn med(name: SuiteName, v: ModelVariant, t: Task) -> f64 {
    suites()[&name].median(v, t).unwrap_or_else(|| panic!("no {v} {t} cell in suite {name}"))
}

#[test]
fn training_direction_of_effect() {
    use ModelVariant::*;
    use SuiteName::*;
    use Task::*;
    let three = [SetComp, VagueQ, PropTarg];
    let mut lines = Vec::new();
    let mut all = true;
    let mut part = |label: &str, ok: bool, detail: String| {
        all &= ok;
        lines.push(format!("  ({label}) {}: {detail}", if ok { "pass" } else { "fail" }));
    };

    let gaps: Vec<(Task, f64, f64)> = three.iter().map(|&t| (t, med(Main, OneTaskFrozen(t), t), med(Main, OneTaskEnd2end(t), t))).collect();
    part(
        "a",
        gaps.iter().all(|(_, f, e)| e > f),
        gaps.iter().map(|(t, f, e)| format!("{t} frozen {f:.3} -> end2end {e:.3}")).collect::<Vec<_>>().join(", "),
    );

    let one = |t| med(Main, OneTaskEnd2end(t), t);
    let multi = |t| med(Main, MultiTaskProp, t);
    part(
        "b",
        multi(PropTarg) >= one(PropTarg) + 0.05 && multi(SetComp) >= one(SetComp) - 0.02 && multi(VagueQ) >= one(VagueQ) - 0.02,
        format!(
            "propTarg {:.3} vs {:.3}, setComp {:.3} vs {:.3}, vagueQ {:.3} vs {:.3}",
            multi(PropTarg),
            one(PropTarg),
            multi(SetComp),
            one(SetComp),
            multi(VagueQ),
            one(VagueQ)
        ),
    );

    let num = |t| med(Number, MultiTaskNumber, t);
    let one_n = med(Number, OneTaskEnd2end(NTarg), NTarg);
    part(
        "c",
        num(NTarg) <= one_n - 0.10 && num(SetComp) < one(SetComp) && num(VagueQ) < one(VagueQ),
        format!(
            "nTarg {:.3} vs one-task {one_n:.3}, setComp {:.3} vs {:.3}, vagueQ {:.3} vs {:.3}",
            num(NTarg),
            num(SetComp),
            one(SetComp),
            num(VagueQ),
            one(VagueQ)
        ),
    );

    let rev = |t| med(Reversed, MultiTaskReversed, t);
    part(
        "d",
        three.iter().all(|&t| rev(t) < multi(t)),
        three.iter().map(|&t| format!("{t} {:.3} vs {:.3}", rev(t), multi(t))).collect::<Vec<_>>().join(", "),
    );

    let chance = 1.0 / 17.0;
    let (u_one, u_multi) = (med(Unseen, OneTaskEnd2end(PropTarg), PropTarg), med(Unseen, MultiTaskProp, PropTarg));
    part(
        "e",
        u_one <= 2.0 * chance && u_multi >= 3.0 * chance,
        format!("unseen propTarg one-task {u_one:.3} (<= {:.3}), multi-task {u_multi:.3} (>= {:.3})", 2.0 * chance, 3.0 * chance),
    );

    let mut detail = String::from("medians over seeds");
    for l in &lines {
        detail.push('\n');
        detail.push_str(l);
    }
    for (name, r) in suites() {
        detail.push_str(&format!("\n  table {name}:\n"));
        for row in r.table_csv().lines() {
            detail.push_str(&format!("    {row}\n"));
        }
        detail.pop();
    }
    assert!(report(7, "training direction of effect", all, &detail));
}

#[test]
fn structure_of_errors() {
    let runs: Vec<_> = suites()[&SuiteName::Main]
        .records
        .iter()
        .filter(|r| r.summary.variant == ModelVariant::MultiTaskProp)
        .collect();
    let mut adj: Vec<f64> = runs.iter().map(|r| r.summary.adjacency.expect("propTarg errors")).collect();
    adj.sort_by(f64::total_cmp);
    let adjacency = adj[adj.len() / 2];
    let pca: Vec<(f64, f64)> = runs
        .iter()
        .map(|r| {
            let p = r.summary.pca.as_ref().expect("pca export");
            (p.within, p.between)
        })
        .collect();
    let clustered = pca.iter().all(|(w, b)| w < b);
    let detail = format!(
        "median adjacent-error fraction {adjacency:.3} over {} runs (need >= 0.6); PCA within/between {}",
        runs.len(),
        pca.iter().map(|(w, b)| format!("{w:.3}/{b:.3}")).collect::<Vec<_>>().join(", ")
    );
    assert!(report(8, "structure of errors", adjacency >= 0.6 && clustered, &detail));
}

#[test]
fn reproducibility() {
    let p = prepared();
    let mut s = p.settings.clone();
    s.set("variant", "multi-task-prop").unwrap();
    s.set("epochs", "2").unwrap();
    let cfg = TrainConfig::from_settings(&s).unwrap();
    let data = Dataset::load(&s.dataset_path(DatasetKind::Standard)).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let dirs: Vec<PathBuf> = ["a", "b"].iter().map(|d| tmp.path().join(d)).collect();
    for d in &dirs {
        pool.install(|| train(&cfg, &data, Some(&p.encoder), d, Existing::Refuse, &quiet)).unwrap();
    }
    let a = std::fs::read(dirs[0].join("metrics.csv")).unwrap();
    let b = std::fs::read(dirs[1].join("metrics.csv")).unwrap();
    let detail = format!("two single-threaded runs of {}: metrics.csv {} bytes, identical: {}", cfg.run_name(), a.len(), a == b);
    assert!(report(9, "reproducibility", a == b, &detail));
}
