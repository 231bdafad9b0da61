use ivpf::coder::RansState;
use ivpf::oracle::{self, ScanReport};
use ivpf::prior::MixGaussPrior;
use ivpf::{codec, CodecConfig, FlowModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

fn report(name: &str, domain: String) -> ScanReport {
    ScanReport { name: name.into(), domain, cases: 0, violations: Vec::new(), max_error: 0.0 }
}

fn mat_scans(seed: u64) -> ScanReport {
    let mut grid = Vec::new();
    for d_b in 1..=3usize {
        for k in [0u32, 2] {
            for c_bits in [3u32, 4] {
                for draw in 0..3u64 {
                    grid.push((d_b, k, c_bits, draw));
                }
            }
        }
    }
    grid.into_par_iter()
        .map(|(d_b, k, c_bits, draw)| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (d_b as u64) << 32 ^ (k as u64) << 24 ^ (c_bits as u64) << 16 ^ draw);
            let (s, t) = oracle::random_admissible(d_b, 1.0, &mut rng);
            oracle::brute_force_mat_check(&s, &t, k, c_bits)
        })
        .reduce_with(ScanReport::merge)
        .map(|mut r| {
            r.name = "mat-exhaustive".into();
            r.domain = "d_b 1..3, k {0,2}, C {3,4}, every (x, r) in range".into();
            r
        })
        .unwrap()
}

fn round_trip_grid(seed: u64) -> ScanReport {
    let mut grid = Vec::new();
    for h in [1u32, 4, 8] {
        for dk in [0u32, 4, 10] {
            for c_bits in [4u32, 16, 24] {
                grid.push((h, h + dk, c_bits));
            }
        }
    }
    let mut rep = report("round-trip-grid", "h {1,4,8}, k-h {0,4,10}, C {4,16,24}, 4x4x3 models".into());
    let parts: Vec<(u64, Vec<String>)> = grid
        .into_par_iter()
        .map(|(h, k, c_bits)| {
            let model_seed = seed.wrapping_add((h * 1000 + k * 10 + c_bits) as u64);
            let mut model = match FlowModel::random_init(vec![4, 4, 3], 4, 2, model_seed) {
                Ok(m) => m,
                Err(e) => return (0, vec![format!("model init: {e}")]),
            };
            model.perturb(0.2, model_seed);
            model.support = 3.0;
            let cfg = CodecConfig { h, k, c_bits, ..CodecConfig::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(model_seed);
            let mut bad = Vec::new();
            for _ in 0..20 {
                let x: Vec<u8> = (0..48).map(|_| rng.random_range(0..1u32 << h) as u8).collect();
                let back = codec::compress(&model, &cfg, &x)
                    .and_then(|(c, _)| codec::Container::from_bytes(&c.to_bytes()))
                    .and_then(|c| codec::decompress(&model, &c));
                match back {
                    Ok(y) if y == x => {}
                    Ok(_) => bad.push(format!("h={h} k={k} C={c_bits}: decoded tensor differs")),
                    Err(e) => bad.push(format!("h={h} k={k} C={c_bits}: {e}")),
                }
            }
            (20, bad)
        })
        .collect();
    for (cases, bad) in parts {
        rep.cases += cases;
        rep.violations.extend(bad);
    }
    rep
}

fn rans_entropy(seed: u64) -> ScanReport {
    let pmf = [0.35, 0.25, 0.2, 0.12, 0.08];
    let n = 16u32;
    let mut freqs: Vec<u64> = pmf.iter().map(|p| (p * 65536.0f64).round() as u64).collect();
    let excess = freqs.iter().sum::<u64>() as i64 - 65536;
    freqs[0] = (freqs[0] as i64 - excess) as u64;
    let cum: Vec<u64> = std::iter::once(0)
        .chain(freqs.iter().scan(0, |a, f| {
            *a += f;
            Some(*a)
        }))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = 1_000_000;
    let syms: Vec<usize> = (0..count)
        .map(|_| {
            let slot = rng.random_range(0..65536u64);
            cum.iter().rposition(|&c| c <= slot).unwrap()
        })
        .collect();
    let mut state = RansState::default();
    let start = state.clone();
    for &s in &syms {
        state.encode_symbol(cum[s], freqs[s], n);
    }
    let bits = (state.bit_len() - start.bit_len()) as f64;
    let entropy: f64 = -pmf.iter().map(|p| p * p.log2()).sum::<f64>() * count as f64;
    let mut rep = report("rans-entropy", "1e6 symbols, pmf (0.35, 0.25, 0.2, 0.12, 0.08), n = 16".into());
    rep.cases = count as u64;
    rep.max_error = ((bits - entropy) / entropy).abs();
    if rep.max_error > 1e-3 {
        rep.violations.push(format!("{bits} bits vs entropy {entropy:.0}"));
    }
    for (i, &s) in syms.iter().enumerate().rev() {
        let got = state.decode_symbol(n, |slot| {
            let j = cum.iter().rposition(|&c| c <= slot).unwrap();
            (j, cum[j], freqs[j])
        });
        if got != s {
            rep.violations.push(format!("symbol {i}: decoded {got}, encoded {s}"));
            return rep;
        }
    }
    if state != start {
        rep.violations.push("state not restored after decoding".into());
    }
    rep
}

fn non_volume_preserving_demos(seed: u64) -> ScanReport {
    let mut rep =
        report("non-volume-preserving-demos", "collisions for scales 0.5..0.9, codelength gap for scales 2, 4".into());
    for scale in [0.5, 0.75, 0.9] {
        for k in [8u32, 10, 12] {
            rep.cases += 1;
            if oracle::bijection_failure_demo(scale, k).is_none() {
                rep.violations.push(format!("no collision for scale {scale} at k={k}"));
            }
        }
    }
    let prior = MixGaussPrior::standard(4);
    for scale in [2.0, 4.0] {
        rep.cases += 1;
        match oracle::codelength_gap_demo(scale, &prior, 14, 20_000, seed) {
            Ok(g) => {
                let rel = (g.mean_gap_bits - g.expected_bits).abs() / g.expected_bits;
                rep.max_error = rep.max_error.max(rel);
                if rel > 0.05 {
                    rep.violations
                        .push(format!("scale {scale}: gap {:.3} vs {:.3} bits", g.mean_gap_bits, g.expected_bits));
                }
            }
            Err(e) => rep.violations.push(format!("scale {scale}: {e}")),
        }
    }
    rep
}

fn error_scaling(seed: u64) -> ScanReport {
    let mut rep = report("error-scaling", "k 4..11 at C = 16, 2000 samples, ratio in [0.3, 0.7]".into());
    let curve = FlowModel::random_init(vec![4, 4, 3], 4, 2, seed).and_then(|mut m| {
        m.perturb(0.3, seed);
        let ks: Vec<u32> = (4..=11).collect();
        oracle::error_scaling_probe(&m, &ks, 16, 2000, seed)
    });
    match curve {
        Ok(points) => {
            for p in &points {
                rep.cases += 1;
                rep.max_error = rep.max_error.max(p.max_error);
                if let Some(ratio) = p.ratio {
                    if !(0.3..=0.7).contains(&ratio) {
                        rep.violations.push(format!("k={}: ratio {ratio:.3}", p.k));
                    }
                }
            }
        }
        Err(e) => rep.violations.push(e.to_string()),
    }
    rep
}

pub fn run(seed: u64) -> Vec<ScanReport> {
    let checks: [fn(u64) -> ScanReport; 5] =
        [mat_scans, round_trip_grid, rans_entropy, non_volume_preserving_demos, error_scaling];
    checks.par_iter().map(|f| f(seed)).collect()
}
