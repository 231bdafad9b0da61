use ivpf::codec::{self, flow_forward, flow_inverse, Container};
use ivpf::coder::RansState;
use ivpf::fixnum::QuantVector;
use ivpf::layers::Conv1x1Layer;
use ivpf::mat::{mat_forward, mat_inverse, AuxRegister};
use ivpf::oracle;
use ivpf::{CodecConfig, Error, FlowModel};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn perturbed(shape: Vec<usize>, blocks: usize, levels: usize, seed: u64) -> FlowModel {
    let mut m = FlowModel::random_init(shape, blocks, levels, seed).unwrap();
    m.perturb(0.2, seed + 1);
    m
}

fn admissible(d_b: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    oracle::random_admissible(d_b, 1.5, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn mat_round_trips_and_matches_reference(
        seed in any::<u64>(),
        d_b in 1usize..6,
        k in 0u32..16,
        c_bits in 1u32..20,
        raw in prop::collection::vec(-100_000i64..100_000, 6),
        r0 in any::<u64>(),
    ) {
        let (s, t) = admissible(d_b, seed);
        let x = QuantVector::new(raw[..d_b].to_vec(), k).unwrap();
        let r = AuxRegister::new(r0 % (1 << c_bits), c_bits).unwrap();
        let (z, r1) = mat_forward(&x, &s, &t, r, c_bits).unwrap();
        prop_assert!(r1.value() < 1 << c_bits);
        let (z_ref, r_ref) = oracle::reference_mat_forward(x.mantissas(), r.value(), &s, &t, k, c_bits);
        prop_assert_eq!(z.mantissas(), &z_ref[..]);
        prop_assert_eq!(r1.value(), r_ref);
        let (back, r2) = mat_inverse(&z, &s, &t, r1, c_bits).unwrap();
        prop_assert_eq!(back, x);
        prop_assert_eq!(r2, r);
    }

    #[test]
    fn conv_round_trips(seed in any::<u64>(), channels in 1usize..6, pixels in 1usize..5, r0 in 0u64..(1 << 16)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = FlowModel::new(vec![pixels, channels], vec![ivpf::layers::Layer::Conv1x1(Conv1x1Layer::random_init(channels, &mut rng))],
            ivpf::prior::Prior::MixGauss(ivpf::prior::MixGaussPrior::standard(pixels * channels))).unwrap();
        m.perturb(0.5, seed);
        let ivpf::layers::Layer::Conv1x1(conv) = &m.layers[0] else { unreachable!() };
        let xs: Vec<f64> = (0..pixels * channels).map(|i| ((i as f64 * 0.37 + seed as f64 * 1e-9).sin()) * 0.5).collect();
        let x = QuantVector::from_reals(&xs, 12).unwrap();
        let r = AuxRegister::new(r0, 16).unwrap();
        let (z, r1) = conv.forward(&x, r, 16).unwrap();
        let (back, r2) = conv.inverse(&z, r1, 16).unwrap();
        prop_assert_eq!(back, x);
        prop_assert_eq!(r2, r);
    }

    #[test]
    fn rans_replays_any_symbol_sequence(
        freqs in prop::collection::vec(1u64..1000, 2..12),
        picks in prop::collection::vec(any::<prop::sample::Index>(), 0..400),
        seed in any::<u64>(),
    ) {
        let n = 12u32;
        let total: u64 = freqs.iter().sum();
        // Rescale to a total of 2^n with every symbol keeping at least one slot.
        let mut scaled: Vec<u64> = freqs.iter().map(|f| (f * ((1 << n) - freqs.len() as u64) / total) + 1).collect();
        let short = (1u64 << n) - scaled.iter().sum::<u64>();
        scaled[0] += short;
        let cum: Vec<u64> = std::iter::once(0).chain(scaled.iter().scan(0, |a, f| { *a += f; Some(*a) })).collect();
        let syms: Vec<usize> = picks.iter().map(|p| p.index(scaled.len())).collect();

        let start = RansState::new(seed);
        let mut st = start.clone();
        let u = st.decode_uniform(7, 5);
        for &s in &syms {
            st.encode_symbol(cum[s], scaled[s], n);
        }
        let mut dec = RansState::restore(&st.flush(), seed).unwrap();
        prop_assert_eq!(&dec, &st);
        for &s in syms.iter().rev() {
            let got = dec.decode_symbol(n, |slot| {
                let j = cum.iter().rposition(|&c| c <= slot).unwrap();
                (j, cum[j], scaled[j])
            });
            prop_assert_eq!(got, s);
        }
        dec.encode_uniform(&u, 5);
        prop_assert_eq!(dec, start);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn codec_round_trips_bytes(seed in 0u64..1000, levels in 1usize..3, data in prop::collection::vec(any::<u8>(), 48)) {
        let mut model = perturbed(vec![4, 4, 3], 3, levels, seed);
        model.support = 3.0;
        let (c, report) = codec::compress(&model, &CodecConfig::default(), &data).unwrap();
        prop_assert_eq!(report.dims, 48);
        let bytes = c.to_bytes();
        prop_assert_eq!(bytes.len(), c.total_bytes());
        let back = codec::decompress(&model, &Container::from_bytes(&bytes).unwrap()).unwrap();
        prop_assert_eq!(back, data);
    }

    #[test]
    fn flow_round_trips_any_register(seed in 0u64..1000, r0 in 0u64..(1 << 16), raw in prop::collection::vec(-8192i64..8192, 48)) {
        let model = perturbed(vec![4, 4, 3], 4, 2, seed);
        let x = QuantVector::new(raw, 14).unwrap();
        let r = AuxRegister::new(r0, 16).unwrap();
        let out = flow_forward(&model, &x, r, 16).unwrap();
        let (back, r1) = flow_inverse(&model, &out, 16).unwrap();
        prop_assert_eq!(back, x);
        prop_assert_eq!(r1, r);
    }
}

#[test]
fn model_file_round_trip_preserves_hash_and_codec() {
    let model = perturbed(vec![6, 6, 3], 4, 2, 3);
    let bytes = model.save();
    let loaded = FlowModel::load(&bytes).unwrap();
    assert_eq!(loaded, model);
    assert_eq!(loaded.hash(), model.hash());
    let data: Vec<u8> = (0..108).map(|i| (i * 7 % 256) as u8).collect();
    let (c, _) = codec::compress(&model, &CodecConfig::default(), &data).unwrap();
    assert_eq!(codec::decompress(&loaded, &c).unwrap(), data);
}

#[test]
fn corrupted_model_file_is_rejected() {
    let mut bytes = perturbed(vec![4, 4, 3], 2, 1, 4).save();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    assert!(FlowModel::load(&bytes).is_err());
    assert!(FlowModel::load(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn decoding_with_another_model_is_refused() {
    let a = perturbed(vec![4, 4, 3], 2, 1, 5);
    let b = perturbed(vec![4, 4, 3], 2, 1, 6);
    let (c, _) = codec::compress(&a, &CodecConfig::default(), &[9u8; 48]).unwrap();
    assert!(matches!(codec::decompress(&b, &c), Err(Error::ModelMismatch)));
}

#[test]
fn truncated_containers_are_rejected() {
    let model = perturbed(vec![4, 4, 3], 2, 1, 7);
    let bytes = codec::compress(&model, &CodecConfig::default(), &[100u8; 48]).unwrap().0.to_bytes();
    for cut in [0, 3, bytes.len() / 2, bytes.len() - 1] {
        assert!(Container::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
}

#[test]
fn archives_hold_several_containers() {
    let model = perturbed(vec![4, 4, 3], 2, 1, 8);
    let items: Vec<Vec<u8>> = (0..5u8).map(|j| (0..48).map(|i| i * 5 + j).collect()).collect();
    let cs: Vec<Container> =
        items.iter().map(|x| codec::compress(&model, &CodecConfig::default(), x).unwrap().0).collect();
    let archive = codec::write_archive(&cs);
    let back = codec::read_archive(&archive).unwrap();
    assert_eq!(back, cs);
    for (c, x) in back.iter().zip(&items) {
        assert_eq!(&codec::decompress(&model, c).unwrap(), x);
    }
}
