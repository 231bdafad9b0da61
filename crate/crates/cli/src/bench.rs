use anyhow::Result;
use ivpf::codec::{self, flow_forward, preprocess};
use ivpf::mat::AuxRegister;
use ivpf::{CodecConfig, FlowModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::time::Instant;

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub items: usize,
    pub dims: usize,
    pub layers: usize,
    pub threads: usize,
    /// Sequential, one item at a time.
    pub encode_items_per_sec: f64,
    pub decode_items_per_sec: f64,
    /// Share of encode time spent evaluating the flow rather than coding.
    pub flow_eval_share: f64,
    /// Batched coder calls per item: one noise draw, one latent push.
    pub coding_steps_per_item: u32,
    /// Compress then decompress every item across the thread pool.
    pub parallel_items_per_sec: f64,
    pub bpd: f64,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let rows = [
            ("items", format!("{}", self.items)),
            ("dims per item", format!("{}", self.dims)),
            ("layers", format!("{}", self.layers)),
            ("encode items/s", format!("{:.1}", self.encode_items_per_sec)),
            ("decode items/s", format!("{:.1}", self.decode_items_per_sec)),
            ("flow eval share", format!("{:.1}%", 100.0 * self.flow_eval_share)),
            ("coding steps per item", format!("{}", self.coding_steps_per_item)),
            (&*format!("round trips/s ({} threads)", self.threads), format!("{:.1}", self.parallel_items_per_sec)),
            ("bpd", format!("{:.4}", self.bpd)),
        ]
        .map(|(k, v)| format!("{k:<28}{v:>12}"));
        rows.join("\n")
    }
}

pub fn run(model: &FlowModel, cfg: &CodecConfig, items: usize, seed: u64) -> Result<BenchReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.input_dim();
    // Smooth ramps with noise, closer to images than white noise.
    let data: Vec<Vec<u8>> = (0..items)
        .map(|_| {
            let base = rng.random_range(40..200) as f64;
            (0..d)
                .map(|i| {
                    (base + 30.0 * ((i as f64) * 0.05).sin() + rng.random_range(-8.0..8.0)).clamp(0.0, 255.0) as u8
                })
                .collect()
        })
        .collect();

    let start = Instant::now();
    let mut containers = Vec::with_capacity(items);
    let mut reports = Vec::with_capacity(items);
    for x in &data {
        let (c, r) = codec::compress(model, cfg, x)?;
        containers.push(c);
        reports.push(r);
    }
    let encode = start.elapsed().as_secs_f64();

    let start = Instant::now();
    for x in &data {
        flow_forward(model, &preprocess(x, cfg.h, cfg.k)?, AuxRegister::ZERO, cfg.c_bits)?;
    }
    let flow = start.elapsed().as_secs_f64();

    let start = Instant::now();
    for c in &containers {
        codec::decompress(model, c)?;
    }
    let decode = start.elapsed().as_secs_f64();

    let start = Instant::now();
    data.par_iter().try_for_each(|x| -> ivpf::Result<()> {
        let (c, _) = codec::compress(model, cfg, x)?;
        codec::decompress(model, &c)?;
        Ok(())
    })?;
    let parallel = start.elapsed().as_secs_f64();

    let total = ivpf::CodelengthReport::total(&reports);
    Ok(BenchReport {
        items,
        dims: d,
        layers: model.layers.len(),
        threads: rayon::current_num_threads(),
        encode_items_per_sec: items as f64 / encode,
        decode_items_per_sec: items as f64 / decode,
        flow_eval_share: (flow / encode).min(1.0),
        coding_steps_per_item: 2,
        parallel_items_per_sec: items as f64 / parallel,
        bpd: total.map_or(0.0, |t| t.bpd),
    })
}
