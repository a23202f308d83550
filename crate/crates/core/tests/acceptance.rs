//! Acceptance suite. Prints one line per criterion and exits nonzero if any
//! gating criterion fails.
//!
//! Run alone with `cargo test -p asymforge-core --test acceptance`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use asymforge_core::aem::{asymmetry_map, extract_tumor, TumorIntensity};
use asymforge_core::dataset::{generate_in_memory, CorpusOptions};
use asymforge_core::eval::{combinations, dice, evaluate, Combination};
use asymforge_core::kdtrain::{
    forward, grad_check, post_train, pretrain_then_finetune, train_standard, KDSchedule, ToyModel, TrainConfig,
};
use asymforge_core::phantom::{cohort, generate, generate_parts, normalize_all, random_tumor, PhantomSpec};
use asymforge_core::symmetry::{calibrate, calibrate_detailed};
use asymforge_core::synth::{fuse_label_voxel, fuse_labels, region_masks, transplant};
use asymforge_core::{Axis, BrainMask, Dims, LabelVolume, Modality, Sample};

struct Outcome {
    pass: bool,
    /// Reported but not counted toward the exit status.
    advisory: bool,
    detail: String,
}

fn pass_if(pass: bool, detail: String) -> Outcome {
    Outcome {
        pass,
        advisory: false,
        detail,
    }
}

// 1
fn symmetric_phantom_aem() -> Outcome {
    let t0 = Instant::now();
    let (x, _) = generate(&PhantomSpec::healthy(Dims::cube(64)));
    let spec = calibrate(&x, 10).unwrap();
    let d = asymmetry_map(&x, spec);
    let nonzero: usize = d.present().map(|(_, v)| v.data().iter().filter(|&&a| a != 0.0).count()).sum();
    let dt = t0.elapsed().as_secs_f64();
    pass_if(
        spec.offset == 0 && nonzero == 0 && dt < 1.0,
        format!("offset {}, nonzero AEM voxels {nonzero}, {dt:.3}s", spec.offset),
    )
}

// 2
fn tumor_round_trip() -> Outcome {
    let d = Dims::cube(40);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut disjoint = true;
    for _ in 0..5 {
        let host = generate(&PhantomSpec::healthy(d)).0;
        let donor_spec = PhantomSpec {
            tumor: Some(random_tumor(d, 0, &mut rng)),
            ..PhantomSpec::healthy(d)
        };
        let (_, fields, y_b) = generate_parts(&donor_spec);
        let wt = region_masks(&y_b).wt;
        for i in 0..d.len() {
            let (z, yy, x) = d.coords(i);
            disjoint &= !(wt.data()[i] && wt.get(z, yy, d.width - 1 - x));
        }
        let t_b = TumorIntensity {
            fields: fields.clone().map(Some),
        };
        let x_ab = transplant(&host, &t_b).unwrap();
        let spec = calibrate(&x_ab, 10).unwrap();
        let back = extract_tumor(&asymmetry_map(&x_ab, spec), &y_b).unwrap();
        for m in Modality::ALL {
            let want = t_b.get(m).unwrap().data();
            let got = back.get(m).unwrap().data();
            let scale = want.iter().fold(0f64, |a, &v| a.max(v.abs() as f64));
            let err = want.iter().zip(got).fold(0f64, |a, (&w, &g)| a.max((w as f64 - g as f64).abs()));
            if scale > 0.0 {
                worst = worst.max(err / scale);
            }
        }
    }
    pass_if(
        disjoint && worst < 1e-6,
        format!("max relative error {worst:.2e} over 5 donors x 4 modalities, supports disjoint from mirror: {disjoint}"),
    )
}

// 3
fn transplant_identity() -> Outcome {
    let mut s = cohort(2, Dims::cube(24), 3);
    normalize_all(&mut s).unwrap();
    let mut identical = true;
    for smp in &s {
        let out = transplant(&smp.image, &TumorIntensity::zeros(smp.dims())).unwrap();
        for m in Modality::ALL {
            let a = smp.image.get(m).unwrap().data().iter().map(|v| v.to_bits());
            let b = out.get(m).unwrap().data().iter().map(|v| v.to_bits());
            identical &= a.eq(b);
        }
    }
    pass_if(identical, format!("bit-identical on {} normalized hosts", s.len()))
}

fn ranking_oracle(a: u8, b: u8) -> u8 {
    let order = [0u8, 2, 1, 4];
    let pos = |l: u8| order.iter().position(|&o| o == l).unwrap();
    if pos(a) >= pos(b) {
        a
    } else {
        b
    }
}

// 4
fn label_fusion() -> Outcome {
    let labels = [0u8, 1, 2, 4];
    let mut mismatches = 0;
    for a in labels {
        for b in labels {
            if fuse_label_voxel(a, b).unwrap() != ranking_oracle(a, b) {
                mismatches += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = Dims::new(6, 7, 8);
    let mut nested = 0;
    for _ in 0..100 {
        let mut rand_labels = || {
            let v = (0..d.len()).map(|_| labels[rng.random_range(0..4)]).collect();
            LabelVolume::new(d, v).unwrap()
        };
        let fused = fuse_labels(&rand_labels(), &rand_labels()).unwrap();
        let r = region_masks(&fused);
        if r.et.is_subset_of(&r.tc) && r.tc.is_subset_of(&r.wt) {
            nested += 1;
        }
    }
    pass_if(
        mismatches == 0 && nested == 100,
        format!("{} / 16 pairs match the ranking oracle, nesting holds on {nested} / 100 fused volumes", 16 - mismatches),
    )
}

// 5
fn calibration_recovery() -> Outcome {
    let d = Dims::new(24, 28, 48);
    let mut recovered = 0;
    let mut notes = Vec::new();
    for shift in -5..=5 {
        let (x, _) = generate(&PhantomSpec {
            shift,
            ..PhantomSpec::healthy(d)
        });
        let cal = calibrate_detailed(&x, Axis::Width, 10).unwrap();
        let cost = cal.cost_at(cal.spec.offset).unwrap();
        if cal.spec.offset == 2 * shift && cal.spec.midplane_shift() == shift as f64 && cost == 0 {
            recovered += 1;
        } else {
            notes.push(format!("shift {shift}: offset {} cost {cost}", cal.spec.offset));
        }
    }
    pass_if(
        recovered == 11,
        format!("{recovered} / 11 shifts in [-5, 5] recovered at cost 0 {}", notes.join("; ")),
    )
}

fn brute_dice(p: &[bool], g: &[bool]) -> f64 {
    let (mut i, mut np, mut ng) = (0usize, 0usize, 0usize);
    for k in 0..p.len() {
        i += (p[k] && g[k]) as usize;
        np += p[k] as usize;
        ng += g[k] as usize;
    }
    if np + ng == 0 {
        1.0
    } else {
        2.0 * i as f64 / (np + ng) as f64
    }
}

// 6
fn dice_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut exact = 0;
    for _ in 0..1000 {
        let d = Dims::new(rng.random_range(1..=16), rng.random_range(1..=16), rng.random_range(1..=16));
        let (fp, fg): (f64, f64) = (rng.random(), rng.random());
        let p: Vec<bool> = (0..d.len()).map(|_| rng.random_bool(fp)).collect();
        let g: Vec<bool> = (0..d.len()).map(|_| rng.random_bool(fg)).collect();
        let got = dice(&BrainMask::new(d, p.clone()).unwrap(), &BrainMask::new(d, g.clone()).unwrap()).unwrap();
        exact += (got == brute_dice(&p, &g)) as usize;
    }
    let d = Dims::cube(4);
    let p = BrainMask::from_fn(d, |z, _, _| z < 2);
    let q = BrainMask::from_fn(d, |z, _, _| z >= 2);
    let e = BrainMask::empty(d);
    let trivial = dice(&p, &p).unwrap() == 1.0 && dice(&p, &q).unwrap() == 0.0 && dice(&e, &e).unwrap() == 1.0;
    pass_if(
        exact == 1000 && trivial,
        format!("{exact} / 1000 random pairs exact; self=1, disjoint=0, empty-empty=1: {trivial}"),
    )
}

fn toy_data(n: usize, side: usize, seed: u64) -> Vec<Sample> {
    let mut s = cohort(n, Dims::cube(side), seed);
    normalize_all(&mut s).unwrap();
    s
}

// 7
fn gradient_check() -> Outcome {
    let data = toy_data(4, 10, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let base = ToyModel::random(16, &mut rng);
    let cfg = TrainConfig {
        epochs: 20,
        lr: 0.03,
        ..Default::default()
    };
    let (trained, _) = train_standard(&base, &data, &[], &cfg, "train").unwrap();
    let sched = KDSchedule {
        epochs: 3,
        lr: 0.01,
        ..Default::default()
    };
    let student = post_train(&trained, &data, &[], &sched, 1).unwrap().student;
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for (i, m) in Modality::ALL.into_iter().enumerate() {
        let gc = grad_check(&trained, &student, &data[i], m, 1e-5, 64, &mut rng).unwrap();
        worst = worst.max(gc.max_rel_error);
        coords += gc.coords.len();
    }
    pass_if(
        worst < 1e-4 && coords >= 50,
        format!("max relative error {worst:.2e} over {coords} coordinates (eps 1e-5, f64)"),
    )
}

// 8
fn kd_protocol() -> Outcome {
    let data = toy_data(4, 10, 8);
    let trained = ToyModel::random(16, &mut ChaCha8Rng::seed_from_u64(8));
    let (teacher, student) = (trained.clone(), trained.clone());
    let (ft, _) = forward(&teacher, &data[0].image);
    let (fs, _) = forward(&student, &data[0].image);
    let init_exact = ft.data.iter().map(|v| v.to_bits()).eq(fs.data.iter().map(|v| v.to_bits()));

    let sched = KDSchedule {
        k: 5,
        epochs: 20,
        lr: 0.01,
        batch_size: Some(2),
        ..Default::default()
    };
    let out = post_train(&trained, &data, &[], &sched, 8).unwrap();
    let refresh_epochs: Vec<usize> = out.refreshes.iter().map(|(e, _)| *e).collect();
    let mut teacher_ok = refresh_epochs == [5, 10, 15, 20] && out.teacher_fingerprints[0] == trained.fingerprint();
    for (e, fp) in out.teacher_fingerprints.iter().enumerate().map(|(i, f)| (i + 1, *f)) {
        let want = match (e - 1) / 5 {
            0 => trained.fingerprint(),
            j => out.refreshes[j - 1].1.fingerprint(),
        };
        teacher_ok &= fp == want;
    }
    teacher_ok &= out.refreshes.last().map(|(_, m)| m) == Some(&out.student);
    let sum_exact = out.steps.iter().all(|s| s.l_post == s.l_seg + s.l_kd)
        && out.log.iter().all(|e| (e.l_post - (e.l_seg + e.l_kd)).abs() <= 1e-15 * e.l_post.abs().max(1.0));
    pass_if(
        init_exact && teacher_ok && sum_exact,
        format!(
            "f_t == f_s at init: {init_exact}; teacher fixed between refreshes at epochs {refresh_epochs:?}: {teacher_ok}; l_post = l_seg + l_kd on {} steps: {sum_exact}",
            out.steps.len()
        ),
    )
}

fn three_modality_wt(model: &ToyModel, test: &[Sample]) -> f64 {
    let c: Vec<Combination> = combinations().into_iter().filter(|c| c.len() == 3).collect();
    100.0 * c.iter().map(|&c| evaluate(model, test, c).unwrap().wt).sum::<f64>() / c.len() as f64
}

// 9
fn kd_efficacy() -> Outcome {
    let t0 = Instant::now();
    let all = toy_data(22, 16, 9);
    let (train, test) = all.split_at(12);
    let base = ToyModel::random(16, &mut ChaCha8Rng::seed_from_u64(9));
    let cfg = TrainConfig {
        epochs: 150,
        lr: 0.03,
        seed: 9,
        ..Default::default()
    };
    let (trained, _) = train_standard(&base, train, &[], &cfg, "train").unwrap();
    let sched = KDSchedule {
        epochs: 50,
        lr: 0.01,
        ..Default::default()
    };
    let student = post_train(&trained, train, &[], &sched, 9).unwrap().student;
    let (before, after) = (three_modality_wt(&trained, test), three_modality_wt(&student, test));
    let dt = t0.elapsed().as_secs_f64();
    pass_if(
        after - before >= 5.0 && dt < 300.0,
        format!("3-modality WT Dice {before:.2} -> {after:.2} ({:+.2} points), {dt:.1}s", after - before),
    )
}

fn mean_dice(model: &ToyModel, test: &[Sample]) -> f64 {
    let d = evaluate(model, test, Combination::FULL).unwrap();
    100.0 * (d.wt + d.tc + d.et) / 3.0
}

// 10
fn pretraining_efficacy() -> Outcome {
    let all = toy_data(14, 16, 11);
    let (train, test) = all.split_at(4);
    let (mut pre_sum, mut base_sum, mut mixed_sum) = (0.0, 0.0, 0.0);
    let seeds = 5;
    for seed in 0..seeds {
        let syn: Vec<Sample> = generate_in_memory(train, &CorpusOptions::new(4, 1, seed))
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.into_sample(format!("syn_{i:05}")))
            .collect();
        let init = ToyModel::random(16, &mut ChaCha8Rng::seed_from_u64(seed));
        let cfg = TrainConfig {
            epochs: 40,
            lr: 0.03,
            seed,
            ..Default::default()
        };
        let (pre, _) = pretrain_then_finetune(&init, &syn, train, &[], &cfg, &cfg).unwrap();
        let (base, _) = train_standard(&init, train, &[], &cfg, "finetune").unwrap();
        let mixed_data: Vec<Sample> = syn.iter().chain(train).cloned().collect();
        let (mixed, _) = pretrain_then_finetune(&init, &syn, &mixed_data, &[], &cfg, &cfg).unwrap();
        pre_sum += mean_dice(&pre, test);
        base_sum += mean_dice(&base, test);
        mixed_sum += mean_dice(&mixed, test);
    }
    let n = seeds as f64;
    let (pre, base, mixed) = (pre_sum / n, base_sum / n, mixed_sum / n);
    pass_if(
        pre >= base,
        format!("mean Dice over 5 seeds: pretrain+real finetune {pre:.2}, no pretraining {base:.2}; mixed finetune (reported only) {mixed:.2}"),
    )
}

fn run(bin: &str, args: &[&str], cwd: &Path) {
    let out = Command::new(bin).args(args).current_dir(cwd).output().expect("spawn asymforge");
    assert!(
        out.status.success(),
        "asymforge {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(dir: &Path, root: &Path, acc: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, root, acc);
            } else if p.file_name().unwrap() != "config.json" {
                acc.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(root, root, &mut acc);
    acc
}

// 11
fn determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_asymforge");
    let tmp = tempfile::tempdir().unwrap();
    let real = tmp.path().join("real");
    run(bin, &["phantom", "--out", real.to_str().unwrap(), "--n", "10", "--size", "12", "--seed", "5"], tmp.path());
    let mut runs = Vec::new();
    for r in ["run_a", "run_b"] {
        let dir = tmp.path().join(r);
        fs::create_dir_all(&dir).unwrap();
        let real_copy = dir.join("real");
        run(bin, &["phantom", "--out", real_copy.to_str().unwrap(), "--n", "10", "--size", "12", "--seed", "5"], &dir);
        let real = real.to_str().unwrap();
        run(bin, &["make-dataset", "--real", real, "--out", "ds", "--ratio", "2", "--workers", "2", "--seed", "7", "--split", "6,2,2"], &dir);
        run(bin, &["pretrain", "--manifest", "ds/manifest.json", "--out", "pre", "--epochs", "5", "--lr", "0.03", "--seed", "1"], &dir);
        run(bin, &["finetune", "--manifest", "ds/manifest.json", "--init", "pre/model.json", "--out", "fine", "--epochs", "5", "--lr", "0.03", "--seed", "1"], &dir);
        run(bin, &["posttrain", "--manifest", "ds/manifest.json", "--init", "fine/model.json", "--out", "post", "--epochs", "5", "--lr", "0.01", "--seed", "1"], &dir);
        run(bin, &["eval", "--model", "post/model.json", "--manifest", "ds/manifest.json", "--out", "report.csv"], &dir);
        runs.push(snapshot(&dir));
    }
    let (a, b) = (&runs[0], &runs[1]);
    let differing: Vec<String> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let kinds = |ext: &str| a.keys().filter(|k| k.extension().is_some_and(|e| e == ext)).count();
    pass_if(
        differing.is_empty(),
        format!(
            "{} artifacts compared ({} .mmv volumes, {} checkpoint blobs, {} json incl. manifest), {} differ {}",
            a.len(),
            kinds("mmv"),
            kinds("bin"),
            kinds("json"),
            differing.len(),
            differing.join(", ")
        ),
    )
}

// 12
fn throughput() -> Outcome {
    let mut real = cohort(8, Dims::cube(80), 12);
    normalize_all(&mut real).unwrap();
    let rate = |workers: usize| {
        let opts = CorpusOptions::new(5, workers, 12);
        let t = Instant::now();
        let n = generate_in_memory(&real, &opts).unwrap().len();
        n as f64 / t.elapsed().as_secs_f64()
    };
    let r1 = rate(1);
    let r8 = rate(8);
    let speedup = r8 / r1;
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let rate_ok = r8 >= 20.0;
    let scaling_ok = speedup >= 4.0;
    let detail = format!(
        "80^3 in-memory synthesis: {r1:.1}/s with 1 worker, {r8:.1}/s with 8 workers, speedup {speedup:.2}x on {cores} available core(s)"
    );
    if cores < 8 {
        // the rate is still gated; scaling cannot be observed without 8 cores
        Outcome {
            pass: rate_ok && scaling_ok,
            advisory: rate_ok,
            detail: format!("{detail}; scaling unmeasurable below 8 cores"),
        }
    } else {
        pass_if(rate_ok && scaling_ok, detail)
    }
}

fn main() {
    // libtest-style filters: skip everything when asked for a different test
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("symmetric phantom yields zero asymmetry map", symmetric_phantom_aem),
        ("tumor field survives transplant and re-extraction", tumor_round_trip),
        ("zero tumor field leaves host bit-identical", transplant_identity),
        ("label fusion ranking and region nesting", label_fusion),
        ("mirror calibration recovers shifts", calibration_recovery),
        ("dice equals voxel-counting oracle", dice_oracle),
        ("post-training gradients match finite differences", gradient_check),
        ("distillation protocol invariants", kd_protocol),
        ("post-training improves 3-modality WT Dice", kd_efficacy),
        ("synthetic pre-training does not hurt", pretraining_efficacy),
        ("reruns are byte-identical", determinism),
        ("synthesis throughput and worker scaling", throughput),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = f();
        let status = if o.pass { "PASS" } else { "FAIL" };
        let note = if !o.pass && o.advisory { " (not gating on this host)" } else { "" };
        println!(
            "criterion {:>2} {status}{note}: {name} | {} [{:.1}s]",
            i + 1,
            o.detail,
            t.elapsed().as_secs_f64()
        );
        if !o.pass && !o.advisory {
            failed += 1;
        }
    }
    println!("acceptance: {} gating failure(s)", failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
