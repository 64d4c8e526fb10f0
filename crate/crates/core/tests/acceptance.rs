//! Acceptance checks. Each test prints one `[PASS]` or `[FAIL]` line; run
//! with `cargo test -p hear-core --test acceptance -- --nocapture` to see
//! them.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Display;
use std::io::Write;

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hear_core::autograd::{Graph, Var};
use hear_core::data::avsd::{AvsdDialogue, LoadMode};
use hear_core::data::dataset::{load_dataset, DIALOGUES_FILE};
use hear_core::data::features::write_archive;
use hear_core::data::synth::{synth_corpus, SynthCorpusConfig};
use hear_core::data::{tokenize, DialogueInstance, FeatureTrack, TokenId, Vocabulary};
use hear_core::decode::{beam_search, greedy_search, DecodeConfig, StepModel};
use hear_core::dlm::{DlmConfig, DlmModel, Fusion};
use hear_core::eval::{evaluate, EvalConfig};
use hear_core::experiment::{desk_train_config, run_ablation};
use hear_core::metrics::{bleu_n, cider_d, meteor_simple, rouge_l};
use hear_core::rle::{
    apply_audio_mask, apply_surrounding_mask, audio_recon_graph, mask_distance_schedule, rle_graph, sample_mask,
    surrounding_zero_set, RleConfig, ScheduleConfig, ScheduleCurve,
};
use hear_core::sal::{
    build_estimator_labels, estimator_vocab, keyword_gate_fuse, sal_loss_and_r_grad, sal_loss_graph, split_labeled,
    train_estimator_split, EstimatorConfig, KeywordSet, LabelConfig, Provenance,
};
use hear_core::trainer::{prepare_examples, train, StepKind, TrainConfig, Variant};
use hear_core::Result;

/// Writes past the test harness's output capture so verdicts show up in a
/// plain `cargo test` log.
fn report(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn verdict(name: &str, pass: bool, detail: impl Display) {
    report(&format!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" }));
    assert!(pass, "{name}: {detail}");
}

// ---------------------------------------------------------------------------
// Schedule

fn hyperbolic_oracle(e: usize, n_max: usize, e_max: usize) -> usize {
    let alpha = (n_max as f64 - 1.0) / (e_max as f64 - 1.0).sqrt();
    (alpha * ((e_max - e) as f64).sqrt()).round() as usize + 1
}

#[test]
fn schedule_exactness() {
    let cfg = ScheduleConfig::default();
    let got: Vec<usize> = [1, 8, 11, 15].iter().map(|&e| mask_distance_schedule(e, &cfg).unwrap()).collect();
    let mut ok = got == [5, 4, 3, 1];
    let mut grid = 0;
    for n_max in 2..=6 {
        for e_max in 5..=20 {
            for curve in [ScheduleCurve::Hyperbolic, ScheduleCurve::Linear, ScheduleCurve::Logistic] {
                let c = ScheduleConfig { curve, n_max, e_max, ..ScheduleConfig::default() };
                ok &= mask_distance_schedule(1, &c).unwrap() == n_max;
                ok &= mask_distance_schedule(e_max, &c).unwrap() == 1;
                grid += 1;
            }
            let c = ScheduleConfig { n_max, e_max, ..ScheduleConfig::default() };
            ok &= (1..=e_max).all(|e| mask_distance_schedule(e, &c).unwrap() == hyperbolic_oracle(e, n_max, e_max));
        }
    }
    verdict("schedule exactness", ok, format!("n at e=1,8,11,15 is {got:?}; {grid} curve/grid endpoint pairs checked"));
}

// ---------------------------------------------------------------------------
// Keyword gating

#[test]
fn keyword_gating_suite() {
    let k = KeywordSet::default();
    let related = ["Can you hear any sounds?", "Do they speak to each other?"];
    let unrelated = ["Who is outside the door?", "Is the vacuum cleaner working?", "What color is his hair?"];
    let tell = "Can you tell where he goes?";
    let mut ok = k.base().len() == 19;
    ok &= related.iter().all(|q| k.contains_audio_keyword(&tokenize(q)));
    ok &= unrelated.iter().all(|q| !k.contains_audio_keyword(&tokenize(q)));
    ok &= !k.contains_audio_keyword(&tokenize(tell));
    ok &= ["any noises ?", "two songs", "the voices"].iter().all(|q| k.contains_audio_keyword(&tokenize(q)));
    report(&format!(
        "note: {tell:?} is keyword-unrelated under the 19-word list (no form of \"tell\" is listed), \
         although it has been reported as keyword-related elsewhere"
    ));

    // Gated fusion must not read the video stream on related questions.
    let vocab = Vocabulary::build(related.iter().chain(unrelated.iter()).copied(), &[]);
    let model = DlmModel::new(tiny_config(4, 3, 2), vocab).unwrap();
    let audio = Array2::from_shape_fn((6, 2), |(i, j)| (i as f64 * 0.3 + j as f64).sin());
    let a = FeatureTrack::new(Array2::from_shape_fn((6, 3), |(i, j)| (i * j) as f64), audio.clone()).unwrap();
    let b = FeatureTrack::new(Array2::from_shape_fn((6, 3), |(i, j)| -7.5 + (i + j) as f64), audio).unwrap();
    let mut bitwise = true;
    for q in related.iter().chain(["is there any music ?", "what noise is that ?"].iter()) {
        let t = tokenize(q);
        let fa = keyword_gate_fuse(&model, &k, &a, &t).unwrap();
        let fb = keyword_gate_fuse(&model, &k, &b, &t).unwrap();
        bitwise &= fa.iter().zip(fb.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    let t = tokenize(unrelated[2]);
    let differs = keyword_gate_fuse(&model, &k, &a, &t).unwrap() != keyword_gate_fuse(&model, &k, &b, &t).unwrap();
    verdict(
        "keyword gating",
        ok && bitwise && differs,
        format!("classification ok: {ok}; gated fusion video-independent: {bitwise}; ungated reads video: {differs}"),
    );
}

// ---------------------------------------------------------------------------
// Gradient checks

fn tiny_config(width: usize, video_dim: usize, audio_dim: usize) -> DlmConfig {
    DlmConfig {
        width,
        heads: 1,
        encoder_layers: 1,
        decoder_layers: 1,
        ff_hidden: 2 * width,
        recon_hidden: width,
        max_len: 40,
        video_dim,
        audio_dim,
        seed: 11,
    }
}

fn tiny_setup() -> (DlmModel, DialogueInstance, FeatureTrack) {
    let vocab = Vocabulary::build(["do you hear it ? yes a dog"], &[]);
    let model = DlmModel::new(tiny_config(4, 3, 2), vocab.clone()).unwrap();
    let inst = DialogueInstance::from_rounds(
        "c",
        vocab.encode("a dog"),
        &[(vocab.encode("do you hear it ?"), vocab.encode("yes"))],
        vocab.encode("do you hear it ?"),
        vocab.encode("yes a dog"),
        3,
    );
    let track = FeatureTrack::new(
        Array2::from_shape_fn((5, 3), |(i, j)| ((i * 3 + j) as f64 * 0.71).sin()),
        Array2::from_shape_fn((5, 2), |(i, j)| ((i * 2 + j) as f64 * 0.43).cos() * 1.5),
    )
    .unwrap();
    (model, inst, track)
}

/// Largest relative error between backprop and central differences over
/// every parameter scalar. Gradients below `floor` in magnitude are compared
/// against `floor`.
fn gradient_check(model: &mut DlmModel, loss: impl Fn(&DlmModel, &mut Graph) -> Var) -> (f64, usize) {
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-4;
    let analytic = {
        let mut g = Graph::new(model.params.tensors());
        let l = loss(model, &mut g);
        g.backward(l).into_params()
    };
    let value = |m: &DlmModel| {
        let mut g = Graph::new(m.params.tensors());
        let l = loss(m, &mut g);
        g.scalar(l)
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    for p in 0..model.params.len() {
        let shape = model.params.tensors()[p].dim();
        for i in 0..shape.0 {
            for j in 0..shape.1 {
                let orig = model.params.tensors()[p][[i, j]];
                model.params.tensors_mut()[p][[i, j]] = orig + H;
                let up = value(model);
                model.params.tensors_mut()[p][[i, j]] = orig - H;
                let down = value(model);
                model.params.tensors_mut()[p][[i, j]] = orig;
                let numeric = (up - down) / (2.0 * H);
                let a = analytic[p].as_ref().map_or(0.0, |t| t[[i, j]]);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    (worst, checked)
}

#[test]
fn gradient_checks() {
    let (mut model, inst, track) = tiny_setup();
    let scalars = model.params.num_scalars();
    let masked = [1usize, 3];
    let mut report = Vec::new();
    let mut ok = scalars <= 1000;

    let (e, n) = gradient_check(&mut model, |m, g| {
        let f = m.fuse(g, &track, Fusion::Plain).unwrap();
        m.answer_loss(g, f, &inst).unwrap()
    });
    report.push(format!("L_DLM {e:.1e}"));
    ok &= e < 1e-4;

    let (e, _) = gradient_check(&mut model, |m, g| sal_loss_graph(m, g, &inst, &track, Fusion::Calibrated(0.7)).unwrap());
    report.push(format!("L_SAL {e:.1e}"));
    ok &= e < 1e-4;
    // The calibration weight itself.
    let (_, dr) = sal_loss_and_r_grad(&model, &inst, &track, 0.7).unwrap();
    let h = 1e-6;
    let fd = (sal_loss_and_r_grad(&model, &inst, &track, 0.7 + h).unwrap().0
        - sal_loss_and_r_grad(&model, &inst, &track, 0.7 - h).unwrap().0)
        / (2.0 * h);
    let e = (dr - fd).abs() / dr.abs().max(fd.abs()).max(1e-4);
    report.push(format!("dL_SAL/dr {e:.1e}"));
    ok &= e < 1e-4;

    let (e, _) = gradient_check(&mut model, |m, g| audio_recon_graph(m, g, &inst, &track, &masked).unwrap());
    report.push(format!("L_ar {e:.1e}"));
    ok &= e < 1e-4;

    // Margin picked so the hinge sits well inside its active region.
    let probe = RleConfig { reconstruction: false, ranking: true, bound_gradients: true, ..RleConfig::default() };
    let (_, parts) = hear_core::rle::rle_loss(&model, &inst, &track, &masked, 1, &probe).unwrap();
    let margin = parts.l_ar_n - parts.l_ar + 0.5;
    let cfg = RleConfig { margin: margin.max(0.05), ..probe.clone() };
    let (e, _) = gradient_check(&mut model, |m, g| rle_graph(m, g, &inst, &track, &masked, 1, &cfg).unwrap().0);
    report.push(format!("L_rub {e:.1e}"));
    ok &= e < 1e-4;
    // With the bound detached, an active hinge passes the L_ar gradient through unchanged.
    let detached = RleConfig { bound_gradients: false, ..cfg };
    let grads = |f: &dyn Fn(&mut Graph) -> Var| {
        let mut g = Graph::new(model.params.tensors());
        let l = f(&mut g);
        g.backward(l).into_params()
    };
    let a = grads(&|g| rle_graph(&model, g, &inst, &track, &masked, 1, &detached).unwrap().0);
    let b = grads(&|g| audio_recon_graph(&model, g, &inst, &track, &masked).unwrap());
    let gap = a
        .iter()
        .zip(&b)
        .map(|(x, y)| match (x, y) {
            (Some(x), Some(y)) => (x - y).iter().fold(0.0f64, |m, v| m.max(v.abs())),
            (None, None) => 0.0,
            _ => f64::INFINITY,
        })
        .fold(0.0, f64::max);
    report.push(format!("detached L_rub vs L_ar {gap:.1e}"));
    ok &= gap < 1e-12;
    verdict("gradient checks", ok, format!("{scalars} parameters, {n} scalars each; {}", report.join(", ")));
}

// ---------------------------------------------------------------------------
// Masking invariants

fn zero_set_oracle(frames: usize, masked: &[usize], n: usize) -> Vec<usize> {
    (0..frames).filter(|&i| masked.iter().any(|&m| i.abs_diff(m) <= n)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]
    #[test]
    fn masking_invariants(frames in 2usize..40, p in 0.01f64..0.99, n in 1usize..8, seed in any::<u64>()) {
        let masked = sample_mask(frames, p, seed).unwrap();
        prop_assert_eq!(masked.len(), ((p * frames as f64).round() as usize).clamp(1, frames));
        let zero = surrounding_zero_set(frames, &masked, n);
        prop_assert_eq!(&zero, &zero_set_oracle(frames, &masked, n));
        let wider: HashSet<usize> = surrounding_zero_set(frames, &masked, n + 1).into_iter().collect();
        prop_assert!(zero.iter().all(|i| wider.contains(i)));

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let track = FeatureTrack::new(
            Array2::from_shape_fn((frames, 3), |_| rng.gen_range(-2.0..2.0)),
            Array2::from_shape_fn((frames, 2), |_| rng.gen_range(-2.0..2.0)),
        ).unwrap();
        let (a, v) = apply_surrounding_mask(&track, &masked, n).unwrap();
        let zs: HashSet<usize> = zero.iter().copied().collect();
        for i in 0..frames {
            for (out, orig) in [(&a, &track.audio), (&v, &track.video)] {
                let same = out.row(i).iter().zip(orig.row(i).iter()).all(|(x, y)| x.to_bits() == y.to_bits());
                if zs.contains(&i) {
                    prop_assert!(out.row(i).iter().all(|&x| x == 0.0));
                } else {
                    prop_assert!(same);
                }
            }
        }
        let am = apply_audio_mask(&track.audio, &masked).unwrap();
        for i in 0..frames {
            if masked.contains(&i) {
                prop_assert!(am.row(i).iter().all(|&x| x == 0.0));
            } else {
                prop_assert!(am.row(i).iter().zip(track.audio.row(i).iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }
}

#[test]
fn masking_invariants_summary() {
    // The property test above fails the run on any violation; this line
    // records the criterion in the printed summary.
    let masked = sample_mask(24, 0.1, 3).unwrap();
    let z1 = surrounding_zero_set(24, &masked, 1);
    let z2 = surrounding_zero_set(24, &masked, 2);
    let ok = masked.len() == 2 && z1.iter().all(|i| z2.contains(i)) && z1 == zero_set_oracle(24, &masked, 1);
    verdict("masking invariants", ok, "256 random (L, p, n, seed) cases in masking_invariants plus a fixed case");
}

// ---------------------------------------------------------------------------
// Metric oracles

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn grams(t: &[String], n: usize) -> Vec<Vec<String>> {
    if t.len() < n {
        return Vec::new();
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

fn count(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

fn bleu_oracle(c: &[String], refs: &[Vec<String>], n: usize) -> f64 {
    if c.is_empty() {
        return 0.0;
    }
    let mut logs = Vec::new();
    for k in 1..=n {
        let cg = grams(c, k);
        if cg.is_empty() && refs.iter().all(|r| r.len() < k) {
            continue;
        }
        let mut seen: Vec<Vec<String>> = Vec::new();
        let mut hit = 0;
        for g in &cg {
            if seen.contains(g) {
                continue;
            }
            seen.push(g.clone());
            let best_ref = refs.iter().map(|r| count(&grams(r, k), g)).max().unwrap_or(0);
            hit += count(&cg, g).min(best_ref);
        }
        if hit == 0 {
            return 0.0;
        }
        logs.push((hit as f64 / cg.len() as f64).ln());
    }
    if logs.is_empty() {
        return 0.0;
    }
    let mut best = refs[0].len();
    for r in refs {
        let (d, bd) = (r.len().abs_diff(c.len()), best.abs_diff(c.len()));
        if d < bd || (d == bd && r.len() < best) {
            best = r.len();
        }
    }
    let bp = if c.len() > best { 1.0 } else { (1.0 - best as f64 / c.len() as f64).exp() };
    bp * (logs.iter().sum::<f64>() / logs.len() as f64).exp()
}

fn lcs_oracle(a: &[String], b: &[String], memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    if let Some(&v) = memo.get(&(a.len(), b.len())) {
        return v;
    }
    let v = if a[a.len() - 1] == b[b.len() - 1] {
        1 + lcs_oracle(&a[..a.len() - 1], &b[..b.len() - 1], memo)
    } else {
        lcs_oracle(&a[..a.len() - 1], b, memo).max(lcs_oracle(a, &b[..b.len() - 1], memo))
    };
    memo.insert((a.len(), b.len()), v);
    v
}

fn rouge_oracle(c: &[String], refs: &[Vec<String>]) -> f64 {
    let mut p: f64 = 0.0;
    let mut r: f64 = 0.0;
    for x in refs {
        let l = lcs_oracle(c, x, &mut HashMap::new()) as f64;
        if !c.is_empty() {
            p = p.max(l / c.len() as f64);
        }
        if !x.is_empty() {
            r = r.max(l / x.len() as f64);
        }
    }
    if p == 0.0 || r == 0.0 {
        return 0.0;
    }
    let b2 = 1.2f64 * 1.2;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Direct CIDEr-D: tf-idf vectors over 1..4-grams, clipped dot product,
/// Gaussian length penalty on bigram counts, times 10.
fn cider_oracle(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Vec<f64> {
    let docs = refs.len() as f64;
    let df = |g: &[String]| {
        let k = g.len();
        refs.iter().filter(|rs| rs.iter().any(|r| count(&grams(r, k), g) > 0)).count()
    };
    let vector = |t: &[String], k: usize| -> Vec<(Vec<String>, f64)> {
        let all = grams(t, k);
        let mut out: Vec<(Vec<String>, f64)> = Vec::new();
        for g in &all {
            if out.iter().any(|(x, _)| x == g) {
                continue;
            }
            let idf = docs.ln() - (df(g).max(1) as f64).ln();
            out.push((g.clone(), count(&all, g) as f64 * idf));
        }
        out
    };
    let norm = |v: &[(Vec<String>, f64)]| v.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
    cands
        .iter()
        .zip(refs)
        .map(|(c, rs)| {
            let mut total = 0.0;
            for r in rs {
                let delta = grams(c, 2).len() as f64 - grams(r, 2).len() as f64;
                let gauss = (-delta * delta / 72.0).exp();
                let mut s = 0.0;
                for k in 1..=4 {
                    let (vc, vr) = (vector(c, k), vector(r, k));
                    let mut dot = 0.0;
                    for (g, x) in &vc {
                        if let Some((_, y)) = vr.iter().find(|(h, _)| h == g) {
                            dot += x.min(*y) * y;
                        }
                    }
                    let (nc, nr) = (norm(&vc), norm(&vr));
                    if nc != 0.0 && nr != 0.0 {
                        dot /= nc * nr;
                    }
                    s += dot * gauss;
                }
                total += s / 4.0;
            }
            total / rs.len() as f64 * 10.0
        })
        .collect()
}

fn stem_oracle(w: &str) -> &str {
    for suf in ["ing", "edly", "ed", "es", "ly", "s"] {
        if w.len() >= suf.len() + 3 && w.ends_with(suf) {
            return &w[..w.len() - suf.len()];
        }
    }
    w
}

/// Enumerates every one-to-one alignment of stem-equal words and keeps the
/// one with most exact matches, then most matches, then fewest chunks.
fn meteor_oracle_single(c: &[String], r: &[String]) -> f64 {
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    fn walk(i: usize, c: &[String], r: &[String], used: &mut Vec<bool>, pick: &mut Vec<Option<usize>>, best: &mut (usize, usize, isize)) {
        if i == c.len() {
            let m = pick.iter().flatten().count();
            let exact = pick.iter().enumerate().filter(|(k, j)| j.is_some_and(|j| c[*k] == r[j])).count();
            let mut chunks = 0isize;
            for k in 0..c.len() {
                if let Some(j) = pick[k] {
                    let continues = k > 0 && j > 0 && pick[k - 1] == Some(j - 1);
                    if !continues {
                        chunks += 1;
                    }
                }
            }
            let score = (exact, m, -chunks);
            if score > *best {
                *best = score;
            }
            return;
        }
        pick.push(None);
        walk(i + 1, c, r, used, pick, best);
        pick.pop();
        for j in 0..r.len() {
            if !used[j] && stem_oracle(&c[i]) == stem_oracle(&r[j]) {
                used[j] = true;
                pick.push(Some(j));
                walk(i + 1, c, r, used, pick, best);
                pick.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (0, 0, 0);
    walk(0, c, r, &mut vec![false; r.len()], &mut Vec::new(), &mut best);
    let (_, m, neg) = best;
    if m == 0 {
        return 0.0;
    }
    let (mf, chunks) = (m as f64, -neg as f64);
    let p = mf / c.len() as f64;
    let rc = mf / r.len() as f64;
    let fmean = 10.0 * p * rc / (rc + 9.0 * p);
    fmean * (1.0 - 0.5 * (chunks / mf).powi(3))
}

fn metric_suite() -> Vec<(Vec<String>, Vec<Vec<String>>)> {
    let cases: [(&str, &[&str]); 20] = [
        ("the cat sat on the mat", &["the cat sat on the mat"]),
        ("the cat sat on the mat", &["a cat is on the mat", "there is a cat on the mat"]),
        ("the the the the", &["the cat is here"]),
        ("i hear music", &["i hear music playing", "yes there is music"]),
        ("no", &["no , it is silent"]),
        ("he is cooking", &["he is cooking dinner"]),
        ("yes , i hear a dog barking", &["yes , i hear a dog barking", "a dog barks"]),
        ("walking dogs barked loudly", &["the dog barks loud while walking"]),
        ("a b c d e f", &["f e d c b a"]),
        ("a b a b a b", &["a b", "b a b"]),
        ("he goes to the kitchen", &["he goes to the garage"]),
        ("nobody talks", &["no , nobody talks", "they do not talk"]),
        ("music music music", &["music"]),
        ("the radio is on", &["yes , it is on", "the radio is playing"]),
        ("talking people", &["people talking"]),
        ("his hair is red", &["his hair is brown"]),
        ("x y", &["x y z w"]),
        ("one two three four five", &["one two three", "three four five"]),
        ("she speaks", &["he spoke"]),
        ("", &["anything at all"]),
    ];
    cases.iter().map(|(c, rs)| (toks(c), rs.iter().map(|r| toks(r)).collect())).collect()
}

#[test]
fn metric_oracle_parity() {
    let suite = metric_suite();
    let mut worst_bleu = 0.0f64;
    let mut worst_rouge = 0.0f64;
    let mut worst_meteor = 0.0f64;
    for (c, rs) in &suite {
        for n in 1..=4 {
            worst_bleu = worst_bleu.max((bleu_n(c, rs, n) - bleu_oracle(c, rs, n)).abs());
        }
        worst_rouge = worst_rouge.max((rouge_l(c, rs) - rouge_oracle(c, rs)).abs());
        let oracle = rs.iter().map(|r| meteor_oracle_single(c, r)).fold(0.0, f64::max);
        worst_meteor = worst_meteor.max((meteor_simple(c, rs) - oracle).abs());
    }
    // Values worked out by hand.
    let hand = [
        (bleu_n(&toks("the cat sat on the mat"), &[toks("the cat sat on the mat")], 4), 1.0),
        // Clipped unigram precision 1/4 with no brevity penalty.
        (bleu_n(&toks("the the the the"), &[toks("the cat is here")], 1), 0.25),
        // 3/3 unigrams, reference length 4: exp(1 - 4/3).
        (bleu_n(&toks("i hear music"), &[toks("i hear music playing")], 1), (1.0f64 - 4.0 / 3.0).exp()),
        // p = 3/3, r = 3/4.
        (rouge_l(&toks("he is cooking"), &[toks("he is cooking dinner")]), 2.44 * 0.75 / (0.75 + 1.44)),
        // LCS 4 of 5 both ways.
        (rouge_l(&toks("he goes to the kitchen"), &[toks("he goes to the garage")]), 0.8),
        (rouge_l(&toks(""), &[toks("anything")]), 0.0),
    ];
    let worst_hand = hand.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let cands: Vec<Vec<String>> = suite.iter().map(|(c, _)| c.clone()).collect();
    let refs: Vec<Vec<Vec<String>>> = suite.iter().map(|(_, r)| r.clone()).collect();
    let got = cider_d(&cands, &refs);
    let want = cider_oracle(&cands, &refs);
    let worst_cider = got.per_instance.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let corpus_gap = (got.corpus - want.iter().sum::<f64>() / want.len() as f64).abs();

    let ok = worst_bleu <= 1e-9 && worst_rouge <= 1e-9 && worst_hand <= 1e-9 && worst_cider <= 1e-6 && corpus_gap <= 1e-6 && worst_meteor <= 1e-6;
    verdict(
        "metric oracle parity",
        ok,
        format!(
            "{} cases; max gaps BLEU {worst_bleu:.1e}, ROUGE-L {worst_rouge:.1e}, hand {worst_hand:.1e}, CIDEr-D {worst_cider:.1e}, meteor-simple {worst_meteor:.1e}",
            suite.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// Beam search

/// Pseudo-random log-probabilities keyed on the prefix.
struct RandomModel {
    seed: u64,
    vocab: usize,
}

impl StepModel for RandomModel {
    fn next_log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let key = prefix.iter().fold(self.seed, |h, &t| h.wrapping_mul(1_000_003).wrapping_add(t as u64 + 1));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let logits: Vec<f64> = (0..self.vocab).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let z = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
        Ok(logits.iter().map(|l| l - z).collect())
    }
}

/// Explicit next-token table; missing prefixes end the sequence.
struct TableModel(BTreeMap<Vec<TokenId>, Vec<f64>>);

impl StepModel for TableModel {
    fn next_log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.0.get(prefix).cloned().unwrap_or_else(|| vec![0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]))
    }
}

#[test]
fn beam_search_oracles() {
    let mut agree = 0;
    for seed in 0..100u64 {
        let model = RandomModel { seed, vocab: 2 + (seed as usize % 5) };
        let max_len = 1 + (seed as usize % 6);
        let cfg = DecodeConfig { beam: 1, max_len, length_penalty: 0.3, eos: 0 };
        let b = beam_search(&model, &cfg).unwrap();
        let g = greedy_search(&model, max_len, 0).unwrap();
        if b.tokens == g.tokens && (b.log_prob - g.log_prob).abs() < 1e-12 {
            agree += 1;
        }
    }

    // 0 = end, 1 = a, 2 = b. Greedy takes a, a, end; the best sequence is b, end.
    let ln = f64::ln;
    let ninf = f64::NEG_INFINITY;
    let mut t = BTreeMap::new();
    t.insert(vec![], vec![ninf, ln(0.6), ln(0.4)]);
    t.insert(vec![1], vec![ln(0.3), ln(0.35), ln(0.35)]);
    t.insert(vec![2], vec![ln(0.9), ln(0.05), ln(0.05)]);
    for p in [vec![1, 1], vec![1, 2], vec![2, 1], vec![2, 2]] {
        t.insert(p, vec![ln(0.5), ln(0.25), ln(0.25)]);
    }
    let model = TableModel(t);
    let cfg = DecodeConfig { beam: 2, max_len: 3, length_penalty: 0.3, eos: 0 };
    let beam = beam_search(&model, &cfg).unwrap();
    // Exhaustive: every sequence that ends or hits the length limit.
    let mut best: Option<(f64, Vec<TokenId>)> = None;
    let mut stack = vec![(Vec::<TokenId>::new(), 0.0)];
    while let Some((seq, lp)) = stack.pop() {
        if seq.last() == Some(&0) || seq.len() == cfg.max_len {
            let score = lp / (seq.len() as f64).powf(cfg.length_penalty);
            if best.as_ref().is_none_or(|(s, b)| score > *s || (score == *s && seq < *b)) {
                best = Some((score, seq));
            }
            continue;
        }
        for (tok, l) in model.next_log_probs(&seq).unwrap().into_iter().enumerate() {
            if l > ninf {
                let mut next = seq.clone();
                next.push(tok);
                stack.push((next, lp + l));
            }
        }
    }
    let (_, want) = best.unwrap();
    let greedy = greedy_search(&model, 3, 0).unwrap();
    let ok = agree == 100 && beam.tokens == want && greedy.tokens != want;
    verdict(
        "beam search oracles",
        ok,
        format!("beam 1 = greedy on {agree}/100 random models; beam 2 {:?}, exhaustive {want:?}, greedy {:?}", beam.tokens, greedy.tokens),
    );
}

// ---------------------------------------------------------------------------
// Estimator

#[test]
fn estimator_behavior() {
    let seed = 0;
    let corpus = synth_corpus(&SynthCorpusConfig { seed, ..Default::default() }).unwrap();
    let questions: Vec<Vec<String>> = corpus
        .instances()
        .map(|(_, i, _)| corpus.vocab.tokens_of(&i.question).into_iter().map(String::from).collect())
        .collect();
    let kw = KeywordSet::default();
    let set = build_estimator_labels(&questions, &kw, &LabelConfig { seed, ..Default::default() }).unwrap();
    let cfg = EstimatorConfig { seed, ..Default::default() };
    let (train_set, holdout) = split_labeled(&set, cfg.holdout_fraction, seed);
    let (model, report) = train_estimator_split(&train_set, &holdout, estimator_vocab(&set, &kw), &cfg).unwrap();
    let mean = |keep: &dyn Fn(&hear_core::sal::LabeledQuestion) -> bool| {
        let s: Vec<f64> = holdout.iter().filter(|q| keep(q)).map(|q| model.score(&q.tokens)).collect();
        (s.iter().sum::<f64>() / s.len() as f64, s.len())
    };
    let (intact, n_pos) = mean(&|q| q.provenance == Provenance::Keyword && q.is_positive());
    let (shuffled, n_shuf) = mean(&|q| q.provenance == Provenance::Shuffle);
    let extremes = ["hear hear hear hear hear hear hear hear", "zzz unknown words only", "?"];
    let in_range = set
        .iter()
        .map(|q| model.score(&q.tokens))
        .chain(extremes.iter().map(|q| model.score_text(q)))
        .all(|s| s > 0.0 && s < 1.0);
    let hear = model.score_text("can you hear any sounds ?");
    let tell = model.score_text("can you tell where he goes ?");
    let ok = report.holdout_auc >= 0.9 && shuffled < intact && in_range && hear > tell;
    verdict(
        "estimator behavior",
        ok,
        format!(
            "held-out AUC {:.3}; intact audio mean {intact:.3} (n={n_pos}) vs shuffled mean {shuffled:.3} (n={n_shuf}); \
             scores in (0,1): {in_range}; hear {hear:.3} > tell {tell:.3}",
            report.holdout_auc
        ),
    );
}

// ---------------------------------------------------------------------------
// Training trends on the synthetic corpus

#[test]
fn rle_training_trend() {
    let corpus_cfg = SynthCorpusConfig { clips: 50, ..Default::default() };
    let mut lower = 0;
    let mut lines = Vec::new();
    let mut ranking_ok = true;
    for seed in 0..3 {
        let base = desk_train_config(seed);
        let ab = run_ablation(&corpus_cfg, &base, &[Variant::Estimator, Variant::Full], &EvalConfig::default(), None).unwrap();
        let without = ab.runs[0].outcome.epochs.last().unwrap().val_sal;
        let with = ab.runs[1].outcome.epochs.last().unwrap().val_sal;
        lower += usize::from(with <= without);
        let tail: Vec<_> = ab.runs[1]
            .outcome
            .steps
            .iter()
            .filter(|s| s.kind == StepKind::Rle && s.epoch + 3 > base.epochs)
            .filter_map(|s| s.parts)
            .collect();
        let frac = tail.iter().filter(|p| p.l_ar < p.l_ar_n).count() as f64 / tail.len() as f64;
        ranking_ok &= !tail.is_empty() && frac >= 0.8;
        lines.push(format!("seed {seed}: val L_SAL {with:.4} with vs {without:.4} without, L_ar < L_ar^n in {:.0}% of late batches", frac * 100.0));
    }
    println!("{}", lines.join("\n"));
    verdict(
        "reconstruction lowers validation loss",
        lower >= 2,
        format!("final-epoch val L_SAL with RLE <= without in {lower}/3 seeds"),
    );
    verdict("ranking bound holds late in training", ranking_ok, "every seed >= 80% of batches in the last 3 epochs");
}

#[test]
fn ablation_ordering() {
    // 100 clips: the 50-clip test split (10 clips) is too small to separate
    // the variants reliably.
    let corpus_cfg = SynthCorpusConfig { clips: 100, ..Default::default() };
    let mut ordered = 0;
    let mut gain = 0.0;
    let mut lines = Vec::new();
    for seed in 0..3 {
        let base = desk_train_config(seed);
        let variants = [Variant::Baseline, Variant::Estimator, Variant::Full];
        let ab = run_ablation(&corpus_cfg, &base, &variants, &EvalConfig::default(), None).unwrap();
        let cider: Vec<f64> = ab.runs.iter().map(|r| r.report.overall.cider_d).collect();
        let bucket: Vec<f64> = ab.runs.iter().map(|r| r.report.estimator_bucket.exact_match).collect();
        ordered += usize::from(cider[2] > cider[1] && cider[1] > cider[0]);
        gain += (bucket[2] - bucket[0]) / 3.0;
        lines.push(format!(
            "seed {seed}: CIDEr-D none {:.3} / s {:.3} / full {:.3}; audio-bucket accuracy none {:.3} / s {:.3} / full {:.3} (n={})",
            cider[0], cider[1], cider[2], bucket[0], bucket[1], bucket[2], ab.runs[0].report.estimator_bucket.count
        ));
    }
    println!("{}", lines.join("\n"));
    verdict("CIDEr-D ordering full > s > none", ordered >= 2, format!("holds in {ordered}/3 seeds"));
    verdict(
        "audio-bucket accuracy gain",
        gain >= 0.05,
        format!("full minus baseline averages {:+.1} points", gain * 100.0),
    );
}

// ---------------------------------------------------------------------------
// AVSD-format ingestion

#[test]
fn avsd_fixture_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/avsd_three.json");
    std::fs::copy(fixture, dir.path().join(DIALOGUES_FILE)).unwrap();
    std::fs::create_dir_all(dir.path().join("features")).unwrap();
    let raw: Vec<AvsdDialogue> = hear_core::data::avsd::read_avsd(&dir.path().join(DIALOGUES_FILE), LoadMode::Strict).unwrap();
    for (k, d) in raw.iter().enumerate() {
        // Audio at twice the video rate, aligned on load.
        let video = Array2::from_shape_fn((6, 4), |(i, j)| ((i + j + k) as f64 * 0.5).sin());
        let audio = Array2::from_shape_fn((12, 3), |(i, j)| ((i * j + k) as f64 * 0.25).cos());
        write_archive(&dir.path().join(format!("features/{}.video", d.clip_id)), &video).unwrap();
        write_archive(&dir.path().join(format!("features/{}.audio", d.clip_id)), &audio).unwrap();
    }
    let ds = load_dataset(dir.path(), LoadMode::Strict).unwrap();
    let kw = KeywordSet::default();
    let vocab = ds.build_vocab(&kw);
    let items = ds.items(&[0, 1, 2], &vocab, 3);
    let rounds: usize = ds.dialogues.iter().map(|d| d.rounds.len()).sum();
    let mut cfg = TrainConfig { epochs: 2, batch_size: 4, ..desk_train_config(0) };
    cfg.model = DlmConfig { width: 16, ff_hidden: 32, recon_hidden: 16, video_dim: 4, audio_dim: 3, ..cfg.model };
    let examples = prepare_examples(items.iter().cloned(), &vocab, None, &kw, cfg.sal_mode);
    let outcome = train(&cfg, vocab, &examples, &examples, Some(&dir.path().join("run"))).unwrap();
    let pairs: Vec<(&DialogueInstance, &FeatureTrack)> = items.iter().map(|(i, t)| (i, t.as_ref())).collect();
    let report = evaluate(&outcome.best, None, &kw, &pairs, &EvalConfig::default()).unwrap();
    let m = &report.overall;
    let finite = [m.bleu1, m.bleu4, m.rouge_l, m.cider_d, m.meteor_simple].iter().all(|v| v.is_finite());
    let ok = ds.dialogues.len() == 3 && items.len() == rounds && report.rows.len() == rounds && finite
        && dir.path().join("run/best.json").exists();
    verdict(
        "AVSD-format ingestion end to end",
        ok,
        format!(
            "3 dialogues, {rounds} rounds decoded; CIDEr-D {:.3}. Leaderboard-scale numbers need the real dataset and pretrained encoders and are not reproduced here",
            m.cider_d
        ),
    );
}
