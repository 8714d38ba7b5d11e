//! Test-side oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]


use candle_core::{DType, Device, Tensor, Var, D};
use ndarray::{Array2, Array3};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wifi2cap::nn::{attend_with_prefix, l2_normalize, Linear};
use wifi2cap::objectives::{info_nce_symmetric, lm_nll, mirror_hinge_bidirectional, mirror_hinge_text_only};
use wifi2cap::student::{GateMode, GatedFusion};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(r: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, r)).collect();
    Tensor::from_vec(data, dims, &Device::Cpu).unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// `‖analytic − numeric‖ / max(‖numeric‖, 1e-12)` with central differences.
pub fn gradient_error(inputs: &[Tensor], f: &dyn Fn(&[Tensor]) -> Tensor) -> f64 {
    let vars: Vec<Var> = inputs.iter().map(|t| Var::from_tensor(t).unwrap()).collect();
    let ts: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let grads = f(&ts).backward().unwrap();
    let h = 1e-6;
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(v.as_tensor()).map(flat).unwrap_or_else(|| vec![0.0; v.elem_count()]);
        let base = flat(v.as_tensor());
        for i in 0..base.len() {
            let eval = |delta: f64| {
                let mut x = base.clone();
                x[i] += delta;
                let mut args: Vec<Tensor> = inputs.to_vec();
                args[k] = Tensor::from_vec(x, v.dims(), &Device::Cpu).unwrap();
                scalar(&f(&args))
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            diff += (analytic[i] - numeric).powi(2);
            norm += numeric * numeric;
        }
    }
    diff.sqrt() / norm.sqrt().max(1e-12)
}

fn unit(t: &Tensor) -> Tensor {
    l2_normalize(t, "test").unwrap()
}

/// Minimum distance of any hinge argument from its kink.
fn hinge_clearance(args: &[Tensor]) -> f64 {
    args.iter().flat_map(flat).map(f64::abs).fold(f64::INFINITY, f64::min)
}

fn paired(a: &Tensor, b: &Tensor) -> Tensor {
    (unit(a) * unit(b)).unwrap().sum(D::Minus1).unwrap()
}

/// Worst relative gradient error per objective over `instances` draws.
pub fn gradient_suite(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut out = Vec::new();

    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = r.random_range(2..6);
        let d = r.random_range(3..8);
        let tau = r.random_range(0.05..1.0);
        let inputs = [randn(&mut r, &[n, d]), randn(&mut r, &[n, d])];
        let f = move |x: &[Tensor]| info_nce_symmetric(&unit(&x[0]), &unit(&x[1]), tau).unwrap();
        worst = worst.max(gradient_error(&inputs, &f));
    }
    out.push(("symmetric InfoNCE", worst));

    let mut worst = 0.0f64;
    let mut done = 0;
    while done < instances {
        let n = r.random_range(1..5);
        let d = r.random_range(3..8);
        let m = r.random_range(0.0..0.6);
        let inputs: Vec<Tensor> = (0..4).map(|_| randn(&mut r, &[n, d])).collect();
        let (v, t, vm, tm) = (&inputs[0], &inputs[1], &inputs[2], &inputs[3]);
        let a1 = ((paired(v, tm) - paired(v, t)).unwrap() + m).unwrap();
        let a2 = ((paired(vm, t) - paired(vm, tm)).unwrap() + m).unwrap();
        if hinge_clearance(&[a1, a2]) < 1e-3 {
            continue;
        }
        let f = move |x: &[Tensor]| {
            mirror_hinge_bidirectional(&unit(&x[0]), &unit(&x[1]), &unit(&x[2]), &unit(&x[3]), m)
                .unwrap()
                .mean_all()
                .unwrap()
        };
        worst = worst.max(gradient_error(&inputs, &f));
        done += 1;
    }
    out.push(("bidirectional mirror hinge", worst));

    let mut worst = 0.0f64;
    for _ in 0..instances {
        let b = r.random_range(1..5);
        let dc = r.random_range(2..6);
        let proj = randn(&mut r, &[b, dc]);
        let inputs = [randn(&mut r, &[b, dc]), randn(&mut r, &[b, dc]), randn(&mut r, &[dc, 2 * dc]), randn(&mut r, &[dc])];
        let f = move |x: &[Tensor]| {
            let fusion = GatedFusion::new(Linear::from_tensors(x[2].clone(), Some(x[3].clone())), GateMode::Learned);
            (fusion.forward(&x[0], &x[1]).unwrap() * &proj).unwrap().sum_all().unwrap()
        };
        worst = worst.max(gradient_error(&inputs, &f));
    }
    out.push(("gated fusion", worst));

    let mut worst = 0.0f64;
    let mut done = 0;
    while done < instances {
        let n = r.random_range(1..5);
        let d = r.random_range(3..8);
        let m = r.random_range(0.0..0.6);
        let inputs: Vec<Tensor> = (0..3).map(|_| randn(&mut r, &[n, d])).collect();
        let arg = ((paired(&inputs[0], &inputs[2]) - paired(&inputs[0], &inputs[1])).unwrap() + m).unwrap();
        if hinge_clearance(&[arg]) < 1e-3 {
            continue;
        }
        let f = move |x: &[Tensor]| {
            mirror_hinge_text_only(&unit(&x[0]), &unit(&x[1]), &unit(&x[2]), m).unwrap().mean_all().unwrap()
        };
        worst = worst.max(gradient_error(&inputs, &f));
        done += 1;
    }
    out.push(("text mirror hinge", worst));

    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = r.random_range(1..4);
        let t = r.random_range(1..6);
        let v = r.random_range(2..7);
        let lengths: Vec<usize> = (0..n).map(|_| r.random_range(1..=t)).collect();
        let targets: Vec<u32> = (0..n * t).map(|_| r.random_range(0..v as u32)).collect();
        let idx = Tensor::from_vec(targets, (n, t, 1), &Device::Cpu).unwrap();
        let inputs = [randn(&mut r, &[n, t, v])];
        let f = move |x: &[Tensor]| {
            let lp = candle_nn::ops::log_softmax(&x[0], D::Minus1).unwrap();
            let step = lp.gather(&idx, D::Minus1).unwrap().squeeze(D::Minus1).unwrap();
            lm_nll(&step, &lengths).unwrap()
        };
        worst = worst.max(gradient_error(&inputs, &f));
    }
    out.push(("autoregressive NLL", worst));
    out
}

/// Attention over explicitly concatenated `[prefix; content]` keys, by loops.
pub fn concat_attention_oracle(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    pk: &[f64],
    pv: &[f64],
    (b, h, t, p, dk): (usize, usize, usize, usize, usize),
    causal: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; b * h * t * dk];
    for bi in 0..b {
        for hi in 0..h {
            let base = (bi * h + hi) * t * dk;
            let pbase = (bi * h + hi) * p * dk;
            let mut keys: Vec<&[f64]> = (0..p).map(|j| &pk[pbase + j * dk..pbase + (j + 1) * dk]).collect();
            let mut vals: Vec<&[f64]> = (0..p).map(|j| &pv[pbase + j * dk..pbase + (j + 1) * dk]).collect();
            keys.extend((0..t).map(|j| &k[base + j * dk..base + (j + 1) * dk]));
            vals.extend((0..t).map(|j| &v[base + j * dk..base + (j + 1) * dk]));
            for i in 0..t {
                let qi = &q[base + i * dk..base + (i + 1) * dk];
                let visible = if causal { p + i + 1 } else { p + t };
                let scores: Vec<f64> = keys[..visible]
                    .iter()
                    .map(|kk| qi.iter().zip(*kk).map(|(a, b)| a * b).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = w.iter().sum();
                for (wj, vj) in w.iter().zip(&vals) {
                    for c in 0..dk {
                        out[base + i * dk + c] += wj / z * vj[c];
                    }
                }
            }
        }
    }
    out
}

/// Worst absolute deviation of prefix attention from the oracle over
/// `shapes` random shapes; every fifth shape has no prefix.
pub fn attention_suite(shapes: usize, seed: u64) -> (f64, usize) {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut empty = 0;
    for s in 0..shapes {
        let b = r.random_range(1..4);
        let h = r.random_range(1..4);
        let t = r.random_range(1..7);
        let p = if s % 5 == 0 { 0 } else { r.random_range(1..6) };
        let dk = r.random_range(1..9);
        let causal = r.random_bool(0.5);
        let q = randn(&mut r, &[b, h, t, dk]);
        let k = randn(&mut r, &[b, h, t, dk]);
        let v = randn(&mut r, &[b, h, t, dk]);
        let pk = randn(&mut r, &[b, h, p, dk]);
        let pv = randn(&mut r, &[b, h, p, dk]);
        let got = flat(&attend_with_prefix(&q, &k, &v, Some((&pk, &pv)), causal).unwrap());
        let want = concat_attention_oracle(&flat(&q), &flat(&k), &flat(&v), &flat(&pk), &flat(&pv), (b, h, t, p, dk), causal);
        if p == 0 {
            empty += 1;
            let none = flat(&attend_with_prefix(&q, &k, &v, None, causal).unwrap());
            worst = worst.max(none.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
        worst = worst.max(got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    (worst, empty)
}

/// Smooth phase lanes: per-lane line plus a slow ripple and small noise,
/// with adjacent steps below π for `k >= 8`.
pub fn smooth_phase(r: &mut ChaCha8Rng, t: usize, a: usize, k: usize, ripple: f64) -> Array3<f64> {
    let mut out = Array3::zeros((t, a, k));
    for ti in 0..t {
        for ai in 0..a {
            let offset = r.random_range(-50.0..50.0);
            let slope = r.random_range(-1.5..1.5);
            let amp = ripple * r.random::<f64>();
            let noise = if ripple > 0.0 { 0.05 } else { 0.0 };
            let ph = r.random_range(0.0..6.3);
            for ki in 0..k {
                let x = ki as f64;
                let v = offset + slope * x + amp * (2.0 * std::f64::consts::PI * x / k as f64 + ph).sin()
                    + noise * r.random_range(-1.0..1.0);
                out[[ti, ai, ki]] = wifi2cap::synth::csi::wrap(v);
            }
        }
    }
    out
}

/// Brute-force reference scorers.
pub mod oracle {

    pub fn toks(s: &str) -> Vec<String> {
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

    pub fn bleu4(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> f64 {
        let mut clipped = [0.0f64; 4];
        let mut total = [0.0f64; 4];
        let (mut c, mut rl) = (0usize, 0usize);
        for (cand, rs) in cands.iter().zip(refs) {
            c += cand.len();
            let mut best: Option<usize> = None;
            for r in rs {
                best = Some(match best {
                    None => r.len(),
                    Some(b) => {
                        let (db, dr) = ((b as i64 - cand.len() as i64).abs(), (r.len() as i64 - cand.len() as i64).abs());
                        if dr < db || (dr == db && r.len() < b) { r.len() } else { b }
                    }
                });
            }
            rl += best.unwrap();
            for n in 1..=4 {
                let cg = grams(cand, n);
                let mut seen: Vec<Vec<String>> = Vec::new();
                for g in &cg {
                    if seen.contains(g) {
                        continue;
                    }
                    seen.push(g.clone());
                    let mx = rs.iter().map(|r| count(&grams(r, n), g)).max().unwrap();
                    clipped[n - 1] += count(&cg, g).min(mx) as f64;
                }
                total[n - 1] += cg.len() as f64;
            }
        }
        if c == 0 {
            return 0.0;
        }
        let eps = 1e-9;
        let geo = (0..4).map(|i| ((clipped[i] + eps) / (total[i] + eps)).ln()).sum::<f64>() / 4.0;
        let bp = if c > rl { 1.0 } else { (1.0 - rl as f64 / c as f64).exp() };
        100.0 * bp * geo.exp()
    }

    fn is_subsequence(sub: &[&String], seq: &[String]) -> bool {
        let mut it = seq.iter();
        sub.iter().all(|w| it.any(|x| x == *w))
    }

    /// LCS by enumerating every subsequence of `a`.
    pub fn lcs(a: &[String], b: &[String]) -> usize {
        let mut best = 0;
        for mask in 0u32..(1 << a.len()) {
            let sub: Vec<&String> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| &a[i]).collect();
            if sub.len() > best && is_subsequence(&sub, b) {
                best = sub.len();
            }
        }
        best
    }

    pub fn rouge_l(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> f64 {
        let beta2 = 1.2f64 * 1.2;
        let mut sum = 0.0;
        for (c, rs) in cands.iter().zip(refs) {
            let p = rs.iter().map(|r| lcs(c, r) as f64 / c.len() as f64).fold(0.0, f64::max);
            let r = rs.iter().map(|r| lcs(c, r) as f64 / r.len() as f64).fold(0.0, f64::max);
            if p > 0.0 && r > 0.0 {
                sum += (1.0 + beta2) * p * r / (r + beta2 * p);
            }
        }
        100.0 * sum / cands.len() as f64
    }

    pub fn cider_d(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> f64 {
        let docs = refs.len() as f64;
        let df = |g: &[String]| -> f64 {
            refs.iter().filter(|rs| rs.iter().any(|r| grams(r, g.len()).iter().any(|x| x.as_slice() == g))).count() as f64
        };
        let vec = |t: &[String], n: usize| -> Vec<(Vec<String>, f64)> {
            let all = grams(t, n);
            let mut out: Vec<(Vec<String>, f64)> = Vec::new();
            for g in &all {
                if out.iter().any(|(x, _)| x == g) {
                    continue;
                }
                let tf = count(&all, g) as f64;
                out.push((g.clone(), tf * (docs.ln() - df(g).max(1.0).ln())));
            }
            out
        };
        let norm = |v: &[(Vec<String>, f64)]| v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        let mut total = 0.0;
        for (c, rs) in cands.iter().zip(refs) {
            let mut per_ref = 0.0;
            for r in rs {
                let delta = grams(c, 2).len() as f64 - grams(r, 2).len() as f64;
                let pen = (-delta * delta / 72.0).exp();
                let mut s = 0.0;
                for n in 1..=4 {
                    let (hv, rv) = (vec(c, n), vec(r, n));
                    let mut dot = 0.0;
                    for (g, hw) in &hv {
                        if let Some((_, rw)) = rv.iter().find(|(x, _)| x == g) {
                            dot += hw.min(*rw) * rw;
                        }
                    }
                    let (nh, nr) = (norm(&hv), norm(&rv));
                    if nh != 0.0 && nr != 0.0 {
                        dot /= nh * nr;
                    }
                    s += dot * pen;
                }
                per_ref += s / 4.0;
            }
            total += 10.0 * per_ref / rs.len() as f64;
        }
        total / cands.len() as f64
    }

    pub fn stem(w: &str) -> String {
        for suf in ["ing", "ed", "es", "ly"] {
            if w.len() >= suf.len() + 3 && w.ends_with(suf) {
                return w[..w.len() - suf.len()].to_string();
            }
        }
        if w.len() >= 4 && w.ends_with('s') && !w.ends_with("ss") {
            return w[..w.len() - 1].to_string();
        }
        w.to_string()
    }

    fn chunk_count(a: &[(usize, usize)]) -> usize {
        let mut s = a.to_vec();
        s.sort();
        (0..s.len()).filter(|&i| i == 0 || !(s[i].0 == s[i - 1].0 + 1 && s[i].1 == s[i - 1].1 + 1)).count()
    }

    /// Every injective matching using only `allowed` pairs, extending `base`.
    fn matchings(allowed: &[(usize, usize)], base: &[(usize, usize)]) -> Vec<Vec<(usize, usize)>> {
        let mut out = Vec::new();
        for mask in 0u64..(1 << allowed.len()) {
            let mut m = base.to_vec();
            let mut ok = true;
            for (i, &(a, b)) in allowed.iter().enumerate() {
                if mask >> i & 1 == 1 {
                    if m.iter().any(|&(x, y)| x == a || y == b) {
                        ok = false;
                        break;
                    }
                    m.push((a, b));
                }
            }
            if ok {
                out.push(m);
            }
        }
        out
    }

    fn best(ms: Vec<Vec<(usize, usize)>>) -> Vec<Vec<(usize, usize)>> {
        let size = ms.iter().map(Vec::len).max().unwrap_or(0);
        let ms: Vec<_> = ms.into_iter().filter(|m| m.len() == size).collect();
        let ch = ms.iter().map(|m| chunk_count(m)).min().unwrap_or(0);
        ms.into_iter().filter(|m| chunk_count(m) == ch).collect()
    }

    /// All scores reachable by an optimal exact-then-stem alignment.
    pub fn meteor_pair_scores(c: &[String], r: &[String]) -> Vec<f64> {
        let exact: Vec<(usize, usize)> =
            (0..c.len()).flat_map(|i| (0..r.len()).map(move |j| (i, j))).filter(|&(i, j)| c[i] == r[j]).collect();
        let stemmed: Vec<(usize, usize)> = (0..c.len())
            .flat_map(|i| (0..r.len()).map(move |j| (i, j)))
            .filter(|&(i, j)| c[i] != r[j] && stem(&c[i]) == stem(&r[j]))
            .chain(exact.iter().copied())
            .collect();
        let mut scores = Vec::new();
        for first in best(matchings(&exact, &[])) {
            let free: Vec<(usize, usize)> = stemmed
                .iter()
                .copied()
                .filter(|&(i, j)| !first.iter().any(|&(a, b)| a == i || b == j))
                .collect();
            for m in best(matchings(&free, &first)) {
                let mm = m.len() as f64;
                let s = if mm == 0.0 {
                    0.0
                } else {
                    let (p, rr) = (mm / c.len() as f64, mm / r.len() as f64);
                    10.0 * p * rr / (rr + 9.0 * p) * (1.0 - 0.5 * (chunk_count(&m) as f64 / mm).powi(3))
                };
                if !scores.iter().any(|x: &f64| (x - s).abs() < 1e-12) {
                    scores.push(s);
                }
            }
        }
        scores
    }

    pub fn meteor(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Option<f64> {
        let mut sum = 0.0;
        for (c, rs) in cands.iter().zip(refs) {
            let mut bestv = 0.0f64;
            for r in rs {
                let s = meteor_pair_scores(c, r);
                if s.len() != 1 {
                    return None;
                }
                bestv = bestv.max(s[0]);
            }
            sum += bestv;
        }
        Some(100.0 * sum / cands.len() as f64)
    }
}

pub struct MiniCorpus {
    pub name: &'static str,
    pub cands: Vec<Vec<String>>,
    pub refs: Vec<Vec<Vec<String>>>,
}

pub fn mini_corpora() -> Vec<MiniCorpus> {
    let t = oracle::toks;
    let mk = |name, rows: &[(&str, &[&str])]| MiniCorpus {
        name,
        cands: rows.iter().map(|(c, _)| t(c)).collect(),
        refs: rows.iter().map(|(_, rs)| rs.iter().map(|r| t(r)).collect()).collect(),
    };
    vec![
        mk(
            "single references",
            &[
                ("a person walks to the left", &["a person walks to the left"]),
                ("a person waves the right hand", &["a person waves the left hand"]),
                ("someone sits down", &["a person sits down slowly on a chair"]),
                ("the person jumps", &["a person jumps in place"]),
            ],
        ),
        mk(
            "multiple references",
            &[
                ("a man is walking left", &["a person walks to the left", "a man walked left quickly"]),
                ("the the the", &["the cat", "the the dog"]),
                ("person turns right then stops", &["a person turns to the right", "person turning right stops"]),
            ],
        ),
        mk(
            "short and repetitive",
            &[
                ("go", &["go left", "go"]),
                ("left left right right", &["right left right left"]),
                ("waving hands slowly", &["waves hand slowly", "slowly waving hands"]),
                ("kicks", &["kick"]),
                ("walks walks", &["walk"]),
            ],
        ),
    ]
}

/// Random text mixing directional words (in several casings), ordinary
/// words, punctuation and whitespace.
pub fn fuzz_caption(r: &mut ChaCha8Rng, lexicon: &wifi2cap::synth::MirrorLexicon) -> String {
    let mut pool: Vec<String> = lexicon.pairs().iter().flat_map(|(a, b)| [a.clone(), b.clone()]).collect();
    pool.extend(["person", "walks", "the", "hand", "lefty", "rightward", "x"].map(String::from));
    let n = r.random_range(0..12);
    let mut s = String::new();
    for _ in 0..n {
        let w = &pool[r.random_range(0..pool.len())];
        let w = match r.random_range(0..4) {
            0 => w.to_ascii_uppercase(),
            1 => {
                let mut c = w.clone();
                c[..1].make_ascii_uppercase();
                c
            }
            2 if w.len() > 2 => {
                let mut c = w.clone();
                c[1..2].make_ascii_uppercase();
                c
            }
            _ => w.clone(),
        };
        s.push_str(&w);
        s.push_str([" ", "  ", ", ", ".", "-", "\t", "'s "][r.random_range(0..7)]);
    }
    s
}

/// Counts of captions and clips that failed to round-trip under double
/// mirroring, over `n` inputs each.
pub fn involution_fuzz(ds: &wifi2cap::synth::Dataset, n: usize, seed: u64) -> (usize, usize) {
    use wifi2cap::synth::{mirror_caption, mirror_clip, Direction};
    let mut r = rng(seed);
    let mut bad_caps = 0;
    for _ in 0..n {
        let s = fuzz_caption(&mut r, &ds.lexicon);
        if mirror_caption(&mirror_caption(&s, &ds.lexicon), &ds.lexicon) != s {
            bad_caps += 1;
        }
    }
    let directional: Vec<&wifi2cap::synth::ClipRecord> = ds.clips.iter().filter(|c| c.is_directional()).collect();
    let mut bad_clips = 0;
    for _ in 0..n {
        let mut clip = directional[r.random_range(0..directional.len())].clone();
        clip.latent.seed = r.random();
        clip.latent.position_index = r.random_range(0..wifi2cap::synth::latent::NUM_POSITIONS);
        if r.random_bool(0.5) {
            clip.latent = clip.latent.mirrored().unwrap();
            clip.caption = mirror_caption(&clip.caption, &ds.lexicon);
            clip.caption_tokens = ds.vocab.encode(&clip.caption);
            clip.text_feature = ds.encoders.encode_text(&clip.caption).unwrap();
        }
        clip.frame_features = ds.encoders.encode_frames(&clip.latent).unwrap();
        let once = mirror_clip(&clip, &ds.encoders, &ds.lexicon, &ds.vocab).unwrap();
        let twice = mirror_clip(&once, &ds.encoders, &ds.lexicon, &ds.vocab).unwrap();
        let flipped = once.latent.direction != clip.latent.direction && once.latent.direction != Direction::None;
        if !flipped || twice.latent != clip.latent || twice.caption != clip.caption
            || twice.caption_tokens != clip.caption_tokens || twice.frame_features != clip.frame_features
            || twice.text_feature != clip.text_feature || twice.csi != clip.csi
        {
            bad_clips += 1;
        }
    }
    (bad_caps, bad_clips)
}

/// Worst residual of sanitizing purely linear phase, and worst change
/// from sanitizing twice, over `n` random arrays.
pub fn sanitize_suite(n: usize, seed: u64) -> (f64, f64) {
    use wifi2cap::synth::sanitize_phase;
    let mut r = rng(seed);
    let (mut linear, mut idem) = (0.0f64, 0.0f64);
    for _ in 0..n {
        let (t, a, k) = (r.random_range(1..5), r.random_range(1..4), r.random_range(8..40));
        let lin = sanitize_phase(&smooth_phase(&mut r, t, a, k, 0.0)).unwrap();
        linear = linear.max(lin.iter().map(|v| v.abs()).fold(0.0, f64::max));
        let once = sanitize_phase(&smooth_phase(&mut r, t, a, k, 2.0)).unwrap();
        let twice = sanitize_phase(&once).unwrap();
        idem = idem.max(once.iter().zip(twice.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }
    (linear, idem)
}

/// Largest `|‖e‖ − 1|` over teacher video, teacher text and student
/// embeddings of `n` fuzzed inputs each.
pub fn norm_fuzz(ds: &wifi2cap::synth::Dataset, n: usize, seed: u64) -> f64 {
    use wifi2cap::nn::ParamStore;
    use wifi2cap::student::{student_arch, Student, StudentConfig};
    use wifi2cap::teacher::{frames_tensor, rows_tensor, tensor_to_array, Teacher, TeacherArch, TeacherConfig};
    let mut r = rng(seed);
    let mut init = wifi2cap::seed::substream(seed, "norm-fuzz");
    let mut store = ParamStore::new(DType::F32);
    let tcfg = TeacherConfig::default();
    let arch = TeacherArch { config: tcfg.clone(), frames: ds.config.features.frames, feature_dim: ds.config.features.dim };
    let teacher = Teacher::new(&arch, &mut store, &mut init).unwrap();
    let student = Student::new(&student_arch(ds, &StudentConfig::default(), tcfg.embed_dim), &mut store, &mut init).unwrap();
    let scale = |r: &mut ChaCha8Rng| 10f64.powf(r.random_range(-3.0..3.0));
    let mut worst = 0.0f64;
    let mut check = |e: Array2<f32>| {
        for row in e.rows() {
            let norm = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            worst = worst.max((norm - 1.0).abs());
        }
    };
    let (l, d) = (ds.config.features.frames, ds.config.features.dim);
    for chunk in 0..n.div_ceil(50) {
        let b = 50.min(n - chunk * 50);
        let frames: Vec<Array2<f32>> = (0..b)
            .map(|_| {
                let s = scale(&mut r);
                Array2::from_shape_fn((l, d), |_| (r.random_range(-1.0..1.0) * s) as f32)
            })
            .collect();
        let refs: Vec<&Array2<f32>> = frames.iter().collect();
        check(tensor_to_array(&teacher.encode_video(&frames_tensor(&refs, DType::F32).unwrap()).unwrap()).unwrap());
        let texts: Vec<Vec<f32>> = (0..b)
            .map(|_| {
                let s = scale(&mut r);
                (0..d).map(|_| (r.random_range(-1.0..1.0) * s) as f32).collect()
            })
            .collect();
        let trefs: Vec<&[f32]> = texts.iter().map(|t| t.as_slice()).collect();
        check(tensor_to_array(&teacher.encode_text(&rows_tensor(&trefs, DType::F32).unwrap()).unwrap()).unwrap());
        let clips: Vec<wifi2cap::synth::ClipRecord> = (0..b)
            .map(|_| {
                let mut c = ds.clips[r.random_range(0..ds.clips.len())].clone();
                let s = scale(&mut r) as f32;
                for view in &mut c.csi {
                    view.amplitude.mapv_inplace(|x| x * s);
                    let shift = r.random_range(-3.0..3.0) as f32;
                    view.phase.mapv_inplace(|x| x + shift);
                }
                c
            })
            .collect();
        let crefs: Vec<&wifi2cap::synth::ClipRecord> = clips.iter().collect();
        let batch = student.batch(&crefs, DType::F32).unwrap();
        check(tensor_to_array(&student.encode_batch(&batch).unwrap()).unwrap());
    }
    worst
}
