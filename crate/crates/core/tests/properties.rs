mod common;

use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voipsteg_core::augment::cutmix;
use voipsteg_core::descriptors::{
    DatasetHeader, DatasetReader, DatasetWriter, DescriptorKind, DescriptorMatrix, VoipSegment,
};
use voipsteg_core::eval::accuracy;
use voipsteg_core::training::{build_triplets, supcon_loss};

fn matrix(kind: DescriptorKind, frames: usize, seed: u64) -> DescriptorMatrix {
    let vocab = kind.default_vocab();
    let mut x = seed;
    let values = (0..kind.channels() * frames)
        .map(|i| {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((x >> 33) as u32) % vocab[i / frames]
        })
        .collect();
    DescriptorMatrix::new(kind, frames, values).unwrap()
}

fn features() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..6, 2usize..9).prop_flat_map(|(b, m)| {
        (Just(b), Just(m), prop::collection::vec(-3.0f64..3.0, 3 * b * m))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cutmix_entries_come_from_one_parent(frames in 1usize..60, seed in any::<u64>(), pitch in any::<bool>()) {
        let kind = if pitch { DescriptorKind::Pitch } else { DescriptorKind::Lsp };
        let d_p = matrix(kind, frames, seed);
        let d_h = matrix(kind, frames, seed ^ 0xABCD);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mixed = cutmix(&d_p, 1.0, &d_h, 0.0, 0.6, &mut rng).unwrap();
        prop_assert!(mixed.lambda > 0.0 && mixed.lambda < 1.0);
        prop_assert_eq!(mixed.label, mixed.lambda);
        for c in 0..kind.channels() {
            for t in 0..frames {
                let want = if mixed.region.contains(c, t) { d_h.get(c, t) } else { d_p.get(c, t) };
                prop_assert_eq!(mixed.matrix.get(c, t), want);
            }
        }
        let same = cutmix(&d_p, 1.0, &d_p, 1.0, 0.6, &mut rng).unwrap();
        prop_assert_eq!(&same.matrix, &d_p);
        prop_assert_eq!(same.label, 1.0);
    }

    #[test]
    fn supcon_is_scale_invariant_and_positive((b, m, raw) in features(), scales in prop::collection::vec(0.1f64..10.0, 15), tau in 0.02f64..2.0) {
        prop_assume!(raw.chunks(m).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6));
        let all = Array2::from_shape_vec((3 * b, m), raw).unwrap();
        let (a, p, n) = (all.slice(ndarray::s![..b, ..]), all.slice(ndarray::s![b..2 * b, ..]), all.slice(ndarray::s![2 * b.., ..]));
        let loss = supcon_loss(&a, &p, &n, tau).unwrap();
        prop_assert!(loss > 0.0);
        let naive = common::naive_supcon(&a.to_owned(), &p.to_owned(), &n.to_owned(), tau);
        prop_assert!((loss - naive).abs() <= 1e-9 * naive.abs().max(1.0));
        let mut scaled = all.clone();
        for (i, mut row) in scaled.rows_mut().into_iter().enumerate() {
            row *= scales[i % scales.len()];
        }
        let (sa, sp, sn) = (scaled.slice(ndarray::s![..b, ..]), scaled.slice(ndarray::s![b..2 * b, ..]), scaled.slice(ndarray::s![2 * b.., ..]));
        let scaled_loss = supcon_loss(&sa, &sp, &sn, tau).unwrap();
        prop_assert!((loss - scaled_loss).abs() <= 1e-9 * loss.max(1.0));
    }

    #[test]
    fn pulling_the_positive_closer_lowers_supcon(m in 2usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |rng: &mut ChaCha8Rng| Array2::from_shape_simple_fn((1, m), || rand::Rng::random_range(rng, -1.0..1.0));
        let a = draw(&mut rng);
        let far = draw(&mut rng);
        let n = draw(&mut rng);
        prop_assume!([&a, &far, &n].iter().all(|x| x.iter().map(|v| v * v).sum::<f64>() > 1e-3));
        let near = &a * 0.8 + &far * 0.2;
        let tau = 0.5;
        let l_far = supcon_loss(&a.view(), &far.view(), &n.view(), tau).unwrap();
        let l_near = supcon_loss(&a.view(), &near.view(), &n.view(), tau).unwrap();
        prop_assert!(l_near <= l_far + 1e-12);
    }

    #[test]
    fn turning_the_negative_away_lowers_supcon(m in 2usize..8, seed in any::<u64>(), t1 in 0.1f64..3.0, dt in 0.01f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || ndarray::Array1::<f64>::from_shape_fn(m, |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let (a, p, o) = (draw(), draw(), draw());
        let a_hat = &a / a.dot(&a).sqrt();
        let ortho = &o - &a_hat * o.dot(&a_hat);
        prop_assume!(a.dot(&a) > 1e-3 && p.dot(&p) > 1e-3 && ortho.dot(&ortho) > 1e-3);
        let o_hat = &ortho / ortho.dot(&ortho).sqrt();
        let t2 = (t1 + dt).min(std::f64::consts::PI);
        prop_assume!(t2 > t1);
        let row = |v: &ndarray::Array1<f64>| v.clone().insert_axis(ndarray::Axis(0));
        let neg = |t: f64| row(&(&a_hat * t.cos() + &o_hat * t.sin()));
        let loss = |t: f64| supcon_loss(&row(&a).view(), &row(&p).view(), &neg(t).view(), 0.5).unwrap();
        prop_assert!(loss(t2) < loss(t1));
    }

    #[test]
    fn inference_commutes_with_batch_permutation(seed in any::<u64>(), frames in 1usize..8) {
        let config = voipsteg_core::ModelConfig { model_dim: 8, num_heads: 2, num_blocks: 1, ..Default::default() };
        let model = voipsteg_core::HamModel::new(config, seed).unwrap();
        let ms: Vec<DescriptorMatrix> = (0..4).map(|i| matrix(DescriptorKind::Lsp, frames, seed ^ i)).collect();
        let forward: Vec<&DescriptorMatrix> = ms.iter().collect();
        let reversed: Vec<&DescriptorMatrix> = ms.iter().rev().collect();
        let a = model.infer(&forward).unwrap().stego_probs().to_vec();
        let mut b = model.infer(&reversed).unwrap().stego_probs().to_vec();
        b.reverse();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn triplets_cycle_every_anchor(pos_sizes in prop::collection::vec(1usize..8, 1..5), neg_sizes in prop::collection::vec(1usize..8, 1..4), surplus in 0usize..4) {
        let mk = |sizes: &[usize], tag: u32| -> Vec<Vec<u32>> {
            sizes.iter().enumerate().map(|(i, &s)| (0..s as u32).map(|k| tag * 1000 + i as u32 * 10 + k).collect()).collect()
        };
        let pos = mk(&pos_sizes, 1);
        let neg = mk(&neg_sizes, 2);
        let out = build_triplets(&pos, &neg).unwrap();
        prop_assert_eq!(&out, &build_triplets(&pos, &neg).unwrap());
        let expected = common::algorithm1(&pos, &neg);
        prop_assert_eq!(out.len(), pos.len());
        for (tb, want) in out.iter().zip(&expected) {
            let got: Vec<(u32, u32, u32)> = tb.triples().map(|(a, p, n)| (*a, *p, *n)).collect();
            prop_assert_eq!(&got, want);
            let mut anchors = tb.anchors.clone();
            let mut positives = tb.positives.clone();
            anchors.sort_unstable();
            anchors.dedup();
            prop_assert_eq!(anchors.len(), tb.len());
            positives.sort_unstable();
            prop_assert_eq!(&anchors, &positives);
        }
        // padding negatives beyond every positive batch size changes nothing
        let padded: Vec<Vec<u32>> = neg.iter().map(|b| {
            let mut b = b.clone();
            b.extend((0..surplus as u32 + 8).map(|k| 9_000 + k));
            b
        }).collect();
        let trimmed: Vec<_> = build_triplets(&pos, &padded).unwrap().into_iter().map(|t| t.anchors).collect();
        let reference: Vec<Vec<u32>> = pos.clone();
        prop_assert_eq!(trimmed, reference);
    }

    #[test]
    fn accuracy_is_label_symmetric(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..200)) {
        let (preds, labels): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        let flip = |v: &[bool]| v.iter().map(|b| !b).collect::<Vec<_>>();
        let acc = accuracy(&preds, &labels).unwrap();
        prop_assert_eq!(acc, accuracy(&flip(&preds), &flip(&labels)).unwrap());
        prop_assert!((acc + accuracy(&flip(&preds), &labels).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn dataset_stream_round_trips(frames in prop::collection::vec(1usize..20, 0..6), seed in any::<u64>(), rate in 0.0f64..1.0) {
        let header = DatasetHeader::new(DescriptorKind::Lsp, seed);
        let segs: Vec<VoipSegment> = frames.iter().enumerate().map(|(i, &f)| VoipSegment {
            id: format!("s{i}"),
            matrix: matrix(DescriptorKind::Lsp, f, seed.wrapping_add(i as u64)),
            label: (i % 2) as f64,
            embedding_rate: if i % 2 == 1 { rate } else { 0.0 },
            duration_s: f as f64 / 100.0,
        }).collect();
        let mut w = DatasetWriter::new(Vec::new(), &header).unwrap();
        for s in &segs {
            w.write_segment(s).unwrap();
        }
        let bytes = w.into_inner().unwrap();
        let reader = DatasetReader::new(bytes.as_slice()).unwrap().unwrap();
        prop_assert_eq!(reader.header(), &header);
        let back: Vec<VoipSegment> = reader.collect::<Result<_, _>>().unwrap();
        prop_assert_eq!(back, segs);
    }
}
