//! Acceptance run. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails. Criteria 4 to 7 share one set of 5-seed runs on
//! the standard synthetic benchmark with the desk training profile.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use iml::autodiff::{grad_check, ops, Tape, Tensor};
use iml::benchmark::{Benchmark, BenchmarkSpec};
use iml::data::{reserve_exemplars, sample_exemplar_episode, EpisodeSpec};
use iml::evaluator::{confidence_interval, evaluate, sweep_exemplars, sweep_lambda, EvalSettings};
use iml::losses::{
    dfa_loss, eiml_loss, ida_loss, incremental_objective, meta_xent_loss, Aux, KlOrder, LossError,
    MethodKind, ObjectiveConfig,
};
use iml::model::{compute_prototypes, discriminant, init_backbone, ModelSnapshot, ParamVars};
use iml::trainer::{
    exemplar_reserve_rng, run_rounds, train_base, train_incremental, train_paragon, Round, Session,
    TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 5;
const EVAL_EPISODES: usize = 500;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn report(id: u32, name: &str, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    });
    let tag = if v.pass { "PASS" } else { "FAIL" };
    println!(
        "criterion {id} [{tag}] {name}: {} ({:.1}s)",
        v.detail,
        start.elapsed().as_secs_f64()
    );
    v.pass
}

// 1. gradient checks

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let b = tiny_benchmark(21);
    let config = two_layer(8);
    let spec = EpisodeSpec::new(5, 2, 3);
    let t = 2.0;
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut checked = 0;
    for seed in 0..3u64 {
        let teacher = random_teacher(&b.old_train, &config, 100 + seed);
        let student = init_backbone(&config, 200 + seed).unwrap();
        let tensors: Vec<Tensor> = student.tensors().cloned().collect();
        let ep = episode(&b.new_train, &spec, seed);
        let x = ep.all_x();
        let anchors = teacher.anchors().subset(&[0, 1, 2, 3, 4]).unwrap();
        let ex = reserve_exemplars(&b.old_train, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let ex_ep =
            sample_exemplar_episode(&ex, 5, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let pv = |vars: &[iml::autodiff::Var]| ParamVars::from_vars(vars).unwrap();

        let mut check =
            |name: &'static str,
             f: &dyn Fn(&mut Tape, &[iml::autodiff::Var]) -> Result<_, LossError>| {
                let r = grad_check(f, &tensors, 1e-4).unwrap();
                assert!(r.checked > 0, "{name}: every coordinate excluded");
                checked += r.checked;
                let e = worst.entry(name).or_insert(0.0);
                *e = e.max(r.max_rel_error);
            };
        check("meta_xent", &|tape, v| meta_xent_loss(tape, &pv(v), &ep, t));
        check("ida", &|tape, v| {
            ida_loss(
                tape,
                &pv(v),
                &teacher,
                &x,
                &anchors,
                t,
                KlOrder::StudentFirst,
            )
        });
        check("ida_teacher_first", &|tape, v| {
            ida_loss(
                tape,
                &pv(v),
                &teacher,
                &x,
                &anchors,
                t,
                KlOrder::TeacherFirst,
            )
        });
        check("dfa", &|tape, v| dfa_loss(tape, &pv(v), &teacher, &x));
        check("eiml", &|tape, v| {
            let (a, n) = eiml_loss(
                tape,
                &pv(v),
                &teacher,
                &ex_ep,
                &x,
                &anchors,
                t,
                KlOrder::StudentFirst,
            )?;
            Ok(tape.add(a, n)?)
        });
        for method in [
            MethodKind::Ft,
            MethodKind::Dfa,
            MethodKind::Ida,
            MethodKind::Eiml,
        ] {
            let aux = Aux {
                anchors: Some(&anchors),
                batch_x: None,
                exemplars: Some(&ex_ep),
            };
            let cfg = ObjectiveConfig {
                lambda: 1.0,
                lambda_old: None,
                lambda_new: None,
                temperature: t,
                kl_order: KlOrder::StudentFirst,
            };
            let name = match method {
                MethodKind::Ft => "objective_ft",
                MethodKind::Dfa => "objective_dfa",
                MethodKind::Ida => "objective_ida",
                _ => "objective_eiml",
            };
            check(name, &|tape, v| {
                Ok(incremental_objective(tape, &pv(v), method, Some(&teacher), &ep, &aux, &cfg)?.0)
            });
        }
    }
    let max = worst.values().copied().fold(0.0, f64::max);
    let elapsed = start.elapsed();
    let summary: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    verdict(
        max <= 1e-5 && elapsed < Duration::from_secs(30),
        format!(
            "max rel error {max:.2e} <= 1e-5 over {checked} coordinates, h = 1e-4, {:.1}s < 30s [{}]",
            elapsed.as_secs_f64(),
            summary.join(", ")
        ),
    )
}

// 2. scalar oracles

fn oracle_equivalence() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let row = |rng: &mut ChaCha8Rng, lim: f64| -> Vec<f64> {
        let n = rng.random_range(1..=12);
        (0..n).map(|_| rng.random_range(-lim..lim)).collect()
    };
    let (mut e_sm, mut e_lse, mut e_kl, mut e_d) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let v = row(&mut rng, 30.0);
        let t = rng.random_range(0.5..4.0);
        let got = ops::softmax(&Tensor::vector(v.clone()), t).unwrap();
        for (a, b) in got.data().iter().zip(softmax_oracle(&v, t)) {
            e_sm = e_sm.max(rel_err(*a, b));
        }
    }
    for _ in 0..1000 {
        let v = row(&mut rng, 30.0);
        let got = ops::logsumexp(&Tensor::vector(v.clone())).unwrap().item();
        e_lse = e_lse.max(rel_err(got, lse_oracle(&v)));
    }
    for _ in 0..1000 {
        let n = rng.random_range(1..=12);
        let dist = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-8.0..8.0)).collect();
            softmax_oracle(&v, 1.0)
        };
        let (p, q) = (dist(&mut rng), dist(&mut rng));
        let got = ops::kl_div(&Tensor::vector(p.clone()), &Tensor::vector(q.clone()))
            .unwrap()
            .item();
        e_kl = e_kl.max(rel_err(got, kl_oracle(&p, &q)));
    }
    for _ in 0..1000 {
        let (m, k, f) = (
            rng.random_range(1..=6),
            rng.random_range(1..=6),
            rng.random_range(1..=16),
        );
        let mut mat = |rows: usize| {
            let d: Vec<f64> = (0..rows * f).map(|_| rng.random_range(-5.0..5.0)).collect();
            Tensor::matrix(rows, f, d).unwrap()
        };
        let (z, c) = (mat(m), mat(k));
        let got = ops::pairwise_sqdist(&z, &c).unwrap();
        for i in 0..m {
            for j in 0..k {
                e_d = e_d.max(rel_err(got.at(i, j), sqdist_oracle(z.row(i), c.row(j))));
            }
        }
    }
    let max = e_sm.max(e_lse).max(e_kl).max(e_d);
    let elapsed = start.elapsed();
    verdict(
        max <= 1e-10 && elapsed < Duration::from_secs(10),
        format!(
            "1000 inputs each, error |x - oracle| / max(1, |oracle|): softmax {e_sm:.1e}, logsumexp {e_lse:.1e}, kl_div {e_kl:.1e}, pairwise_sqdist {e_d:.1e} (<= 1e-10), {:.2}s < 10s",
            elapsed.as_secs_f64()
        ),
    )
}

// 3. zero-weight collapse

fn lambda_zero_collapse() -> Verdict {
    let b = Benchmark::build(&BenchmarkSpec::standard(0)).unwrap();
    let base_cfg = TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    };
    let teacher = train_base(&b.old_train, &b.old_val, &base_cfg)
        .unwrap()
        .snapshot;
    let cfg = TrainConfig {
        lambda: 0.0,
        tasks_per_epoch: 10,
        ..TrainConfig::default()
    };
    let mut ft = Session::incremental(
        &teacher,
        &b.new_train,
        &b.new_val,
        MethodKind::Ft,
        &cfg,
        None,
    )
    .unwrap();
    let mut ida = Session::incremental(
        &teacher,
        &b.new_train,
        &b.new_val,
        MethodKind::Ida,
        &cfg,
        None,
    )
    .unwrap();
    let mut identical = 0;
    for step in 0..50 {
        ft.step().unwrap();
        ida.step().unwrap();
        if ida.params().bit_eq(ft.params()) && ida.optim() == ft.optim() {
            identical += 1;
        }
        if step % 10 == 9 {
            ft.end_epoch().unwrap();
            ida.end_epoch().unwrap();
        }
    }
    let moved = !ft.params().bit_eq(teacher.params());
    verdict(
        identical == 50 && moved,
        format!("IDA(lambda = 0) parameters and optimizer state bitwise equal to FT after {identical}/50 steps"),
    )
}

// 4 to 7. benchmark runs

#[derive(Default)]
struct SeedRuns {
    /// label -> [old, new, unseen] accuracy in percent
    acc: BTreeMap<String, [f64; 3]>,
    /// exemplar count -> [old, new, unseen]
    exemplars: BTreeMap<usize, [f64; 3]>,
    round_anchors: Vec<(String, usize)>,
    main_time: Duration,
}

fn accuracies(snap: &ModelSnapshot, b: &Benchmark, cfg: &TrainConfig) -> [f64; 3] {
    let s = b.test_splits();
    let acc = |i: usize| {
        100.0
            * evaluate(snap, s[i], &cfg.episode, EVAL_EPISODES, cfg.seed, 1)
                .unwrap()
                .mean_acc
    };
    [acc(0), acc(1), acc(2)]
}

fn run_seed(seed: u64) -> SeedRuns {
    let mut out = SeedRuns::default();
    let start = Instant::now();
    let b = Benchmark::build(&BenchmarkSpec::standard(seed)).unwrap();
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let base = train_base(&b.old_train, &b.old_val, &cfg).unwrap().snapshot;
    out.acc.insert("nu".into(), accuracies(&base, &b, &cfg));
    let par = train_paragon(&b.union_train(), &b.union_val(), &cfg)
        .unwrap()
        .snapshot;
    out.acc.insert("par".into(), accuracies(&par, &b, &cfg));
    let ex = reserve_exemplars(
        &b.old_train,
        cfg.exemplars_per_class,
        &mut exemplar_reserve_rng(seed),
    )
    .unwrap();
    for m in [
        MethodKind::Ft,
        MethodKind::Dfa,
        MethodKind::Eiml,
        MethodKind::Ida,
    ] {
        let snap = train_incremental(&base, &b.new_train, &b.new_val, m, &cfg, Some(&ex))
            .unwrap()
            .snapshot;
        out.acc.insert(m.name().into(), accuracies(&snap, &b, &cfg));
    }
    out.main_time = start.elapsed();

    let eval = EvalSettings {
        spec: cfg.episode,
        n_episodes: EVAL_EPISODES,
        seed,
        workers: 1,
    };
    let splits = b.test_splits();
    let table = sweep_lambda(
        &base,
        &b.new_train,
        &b.new_val,
        &splits,
        &[0.0, 10.0],
        &cfg,
        &eval,
    )
    .unwrap();
    for v in ["0", "10"] {
        let row = [0, 1, 2].map(|i| 100.0 * table.get(v, splits[i].split_name()).unwrap().mean_acc);
        out.acc.insert(format!("ida_lambda{v}"), row);
    }
    let counts = [15, 30, 60, 120];
    let table = sweep_exemplars(
        &base,
        &b.old_train,
        &b.new_train,
        &b.new_val,
        &splits,
        &counts,
        &cfg,
        &eval,
    )
    .unwrap();
    for c in counts {
        let row = [0, 1, 2].map(|i| {
            100.0
                * table
                    .get(&c.to_string(), splits[i].split_name())
                    .unwrap()
                    .mean_acc
        });
        out.exemplars.insert(c, row);
    }

    let groups = b.new_rounds(2);
    let rounds: Vec<Round> = groups
        .iter()
        .map(|(train, val)| Round { train, val })
        .collect();
    for m in [MethodKind::Ft, MethodKind::Ida] {
        let outs = run_rounds(&base, &rounds, m, &cfg, None).unwrap();
        let last = &outs[1].snapshot;
        out.round_anchors
            .push((m.name().into(), last.anchors().len()));
        out.acc
            .insert(format!("{}_r2", m.name()), accuracies(last, &b, &cfg));
    }
    out
}

fn mean_of(runs: &[SeedRuns], pick: impl Fn(&SeedRuns) -> Option<[f64; 3]>) -> [f64; 3] {
    let mut acc = [0.0; 3];
    for r in runs {
        let v = pick(r).expect("every seed has the entry");
        for i in 0..3 {
            acc[i] += v[i] / runs.len() as f64;
        }
    }
    acc
}

fn main() {
    println!("acceptance: 9 criteria");
    let mut all = true;
    all &= report(1, "gradient correctness", gradient_correctness);
    all &= report(2, "oracle equivalence", oracle_equivalence);
    all &= report(3, "lambda = 0 collapse", lambda_zero_collapse);

    let start = Instant::now();
    let runs: Vec<SeedRuns> = (0..SEEDS).map(run_seed).collect();
    let bench_time = start.elapsed();
    let main_time: Duration = runs.iter().map(|r| r.main_time).sum();
    let m = |label: &str| mean_of(&runs, |r| r.acc.get(label).copied());

    all &= report(4, "forgetting ordering", || {
        let (nu, ft, ida, par) = (m("nu"), m("ft"), m("ida"), m("par"));
        let methods = ["nu", "ft", "dfa", "eiml", "ida"];
        let max_unseen = methods
            .iter()
            .map(|l| m(l)[2])
            .fold(f64::NEG_INFINITY, f64::max);
        let table: Vec<String> = ["nu", "ft", "dfa", "eiml", "ida", "par"]
            .iter()
            .map(|l| {
                let a = m(l);
                format!("{l} {:.2}/{:.2}/{:.2}", a[0], a[1], a[2])
            })
            .collect();
        let ok = ida[0] >= ft[0] + 5.0
            && ida[2] >= nu[2] + 3.0
            && par[2] >= max_unseen - 1.0
            && main_time <= Duration::from_secs(600);
        verdict(
            ok,
            format!(
                "old IDA {:.2} vs FT {:.2} (needs +5), unseen IDA {:.2} vs NU {:.2} (needs +3), PAR unseen {:.2} vs best method {:.2} (needs >= -1); {SEEDS} seeds, {EVAL_EPISODES} episodes, training+eval {:.0}s <= 600s; old/new/unseen: {}",
                ida[0],
                ft[0],
                ida[2],
                nu[2],
                par[2],
                max_unseen,
                main_time.as_secs_f64(),
                table.join(", ")
            ),
        )
    });

    all &= report(5, "lambda trend", || {
        let (l0, l10) = (m("ida_lambda0"), m("ida_lambda10"));
        verdict(
            l10[0] >= l0[0] + 3.0 && l0[1] >= l10[1] + 2.0,
            format!(
                "old lambda=10 {:.2} vs lambda=0 {:.2} (needs +3), new lambda=0 {:.2} vs lambda=10 {:.2} (needs +2)",
                l10[0], l0[0], l0[1], l10[1]
            ),
        )
    });

    all &= report(6, "exemplar flatness", || {
        let counts = [15usize, 30, 60, 120];
        let means: Vec<[f64; 3]> = counts
            .iter()
            .map(|c| mean_of(&runs, |r| r.exemplars.get(c).copied()))
            .collect();
        let spread = [0, 1, 2].map(|i| {
            let v = means.iter().map(|r| r[i]);
            v.clone().fold(f64::NEG_INFINITY, f64::max) - v.fold(f64::INFINITY, f64::min)
        });
        verdict(
            spread.iter().all(|&s| s <= 2.0),
            format!(
                "EIML spread over {{15, 30, 60, 120}} exemplars: old {:.2}, new {:.2}, unseen {:.2} (each <= 2)",
                spread[0], spread[1], spread[2]
            ),
        )
    });

    all &= report(7, "multi-round", || {
        let (ft, ida) = (m("ft_r2"), m("ida_r2"));
        let expected = 16 + 8 + 8;
        let anchors_ok = runs
            .iter()
            .all(|r| r.round_anchors.iter().all(|(_, n)| *n == expected));
        verdict(
            anchors_ok && ida[0] >= ft[0] + 3.0,
            format!(
                "anchors after 2 rounds = {expected} for every run: {anchors_ok}; round-2 old IDA {:.2} vs FT {:.2} (needs +3)",
                ida[0], ft[0]
            ),
        )
    });
    println!(
        "(benchmark runs for criteria 4-7 took {:.0}s)",
        bench_time.as_secs_f64()
    );

    all &= report(8, "protocol invariants", protocol_invariants);
    all &= report(9, "end-to-end reproducibility", end_to_end);

    println!(
        "acceptance: {}",
        if all {
            "all criteria PASS"
        } else {
            "some criteria FAIL"
        }
    );
    if !all {
        std::process::exit(1);
    }
}

// 8. invariants

fn protocol_invariants() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut row_sum_err = 0.0f64;
    let mut min_kl = f64::INFINITY;
    let mut proto_err = 0.0f64;
    for _ in 0..200 {
        let (m, k, f) = (
            rng.random_range(1..=8),
            rng.random_range(1..=6),
            rng.random_range(1..=6),
        );
        let z: Vec<f64> = (0..m * f).map(|_| rng.random_range(-4.0..4.0)).collect();
        let c: Vec<f64> = (0..k * f).map(|_| rng.random_range(-4.0..4.0)).collect();
        let z = Tensor::matrix(m, f, z).unwrap();
        let p = discriminant(
            &z,
            &Tensor::matrix(k, f, c).unwrap(),
            rng.random_range(0.5..4.0),
        )
        .unwrap();
        for i in 0..m {
            row_sum_err = row_sum_err.max((p.row(i).iter().sum::<f64>() - 1.0).abs());
        }
        let q = ops::softmax(
            &Tensor::vector((0..k).map(|_| rng.random_range(-5.0..5.0)).collect()),
            1.0,
        )
        .unwrap();
        let r = ops::softmax(
            &Tensor::vector((0..k).map(|_| rng.random_range(-5.0..5.0)).collect()),
            1.0,
        )
        .unwrap();
        min_kl = min_kl.min(ops::kl_div(&q, &r).unwrap().item());
        let kk = m.min(3);
        let labels: Vec<usize> = (0..m).map(|i| i % kk).collect();
        let protos = compute_prototypes(&z, &labels, kk).unwrap();
        for class in 0..kk {
            let members: Vec<usize> = (0..m).filter(|&i| labels[i] == class).collect();
            for j in 0..f {
                let exact = neumaier(members.iter().map(|&i| z.at(i, j))) / members.len() as f64;
                proto_err = proto_err.max((protos.at(class, j) - exact).abs());
            }
        }
    }

    let b = tiny_benchmark(8);
    let cfg = quick_config(8);
    let teacher = train_base(&b.old_train, &b.old_val, &cfg).unwrap().snapshot;
    let hash = teacher.fingerprint();
    let ex = reserve_exemplars(&b.old_train, 5, &mut exemplar_reserve_rng(8)).unwrap();
    let mut hash_constant = true;
    for m in [
        MethodKind::Ft,
        MethodKind::Dfa,
        MethodKind::Ida,
        MethodKind::Eiml,
    ] {
        train_incremental(&teacher, &b.new_train, &b.new_val, m, &cfg, Some(&ex)).unwrap();
        hash_constant &= teacher.fingerprint() == hash;
    }

    let spec = EpisodeSpec::new(5, 1, 5);
    let r1 = evaluate(&teacher, &b.unseen_test, &spec, 100, 3, 1).unwrap();
    let r1b = evaluate(&teacher, &b.unseen_test, &spec, 100, 3, 1).unwrap();
    let r4 = evaluate(&teacher, &b.unseen_test, &spec, 100, 3, 4).unwrap();
    let deterministic = r1 == r1b && r1 == r4 && teacher.fingerprint() == hash;

    let (mean, half) = confidence_interval(&[0.0, 1.0]).unwrap();
    let closed = 1.96 * 0.5f64.sqrt() / 2f64.sqrt();
    let ci_ok = mean == 0.5 && (half - closed).abs() <= 1e-12 && (half - 0.980).abs() < 5e-4;

    let ok = row_sum_err <= 1e-12
        && min_kl >= 0.0
        && proto_err <= 1e-12
        && hash_constant
        && deterministic
        && ci_ok;
    verdict(
        ok,
        format!(
            "discriminant row-sum error {row_sum_err:.1e} (<= 1e-12), min KL {min_kl:.2e} (>= 0), prototype error {proto_err:.1e} (<= 1e-12), teacher hash constant: {hash_constant}, evaluate deterministic across 1/4 workers: {deterministic}, CI on {{0,1}} = {half:.6} (closed form {closed:.6})"
        ),
    )
}

// 9. CLI pipeline

fn run_pipeline(dir: &Path, out_dir: &str) -> Result<(), String> {
    let set = format!("out_dir=\"{out_dir}\"");
    let steps: [&[&str]; 5] = [
        &["gen-data"],
        &["train-base"],
        &["train-incr", "--method", "ida"],
        &["eval"],
        &["report"],
    ];
    for step in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_iml"))
            .current_dir(dir)
            .env_remove("IML_SEED")
            .args(["--config", "experiment.toml", "--set", &set])
            .args(step)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!(
                "{step:?} failed: {}",
                String::from_utf8_lossy(&out.stderr)
            ));
        }
    }
    Ok(())
}

fn read_dir_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect()
}

fn end_to_end() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("experiment.toml"), "seed = 3\n").unwrap();
    for out_dir in ["first", "second"] {
        if let Err(e) = run_pipeline(dir, out_dir) {
            return verdict(false, e);
        }
    }
    let a = read_dir_files(&dir.join("first/reports"));
    let b = read_dir_files(&dir.join("second/reports"));
    let snaps_equal = read_dir_files(&dir.join("first/snapshots"))
        == read_dir_files(&dir.join("second/snapshots"));
    let has_table = a.contains_key("tables.md");
    verdict(
        a == b && has_table && snaps_equal,
        format!(
            "gen-data -> train-base -> train-incr --method ida -> eval -> report run twice from one config: {} report files byte-identical: {}, snapshots identical: {snaps_equal}",
            a.len(),
            a == b
        ),
    )
}
