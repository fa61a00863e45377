mod common;

use voipsteg_core::descriptors::{
    embed_pms, embed_qim, embed_traced, gen_cover, read_dataset, segment_frames, write_dataset,
    CoverModel, DatasetHeader, DescriptorKind, VoipSegment,
};

fn lag1_autocorrelation(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
    let cov: f64 = xs.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
    cov / var
}

#[test]
fn covers_are_temporally_correlated() {
    for kind in [DescriptorKind::Lsp, DescriptorKind::Pitch] {
        let seg = &gen_cover(1, kind, 10_000, 3).unwrap()[0];
        for c in 0..kind.channels() {
            let xs: Vec<f64> = seg.matrix.row(c).iter().map(|&v| v as f64).collect();
            let r = lag1_autocorrelation(&xs);
            assert!(r > 0.2, "{kind} channel {c}: lag-1 autocorrelation {r}");
        }
    }
}

#[test]
fn frame_selection_tracks_rate() {
    let vocab = DescriptorKind::Lsp.default_vocab();
    let cover = &gen_cover(1, DescriptorKind::Lsp, 10_000, 5).unwrap()[0];
    for rate in [0.1, 0.5, 0.9] {
        let (stego, trace) = embed_traced(cover, &vocab, rate, 9).unwrap();
        let frac = trace.selected_count() as f64 / 10_000.0;
        let sigma = (rate * (1.0 - rate) / 10_000.0).sqrt();
        assert!((frac - rate).abs() <= 0.02, "rate {rate}: selected {frac}");
        let untouched = (0..10_000)
            .filter(|&t| (0..3).all(|c| stego.matrix.get(c, t) == cover.matrix.get(c, t)))
            .count() as f64
            / 10_000.0;
        assert!(untouched >= (1.0 - rate) - 3.0 * sigma, "rate {rate}: untouched {untouched}");
    }
}

#[test]
fn selected_values_carry_their_bits() {
    let vocab = DescriptorKind::Pitch.default_vocab();
    let cover = &gen_cover(1, DescriptorKind::Pitch, 2_000, 8).unwrap()[0];
    let (stego, trace) = embed_traced(cover, &vocab, 0.7, 1).unwrap();
    for t in 0..2_000 {
        for c in 0..4 {
            let (before, after) = (cover.matrix.get(c, t), stego.matrix.get(c, t));
            if trace.selected[t] {
                assert_eq!(after % 2, trace.bits[c * 2_000 + t] as u32);
                assert!(before.abs_diff(after) <= 1);
            } else {
                assert_eq!(before, after);
            }
        }
    }
}

#[test]
fn parity_separates_full_rate_stego_from_cover() {
    let covers = gen_cover(1, DescriptorKind::Lsp, 10_000, 21).unwrap();
    let carriers = gen_cover(1, DescriptorKind::Lsp, 10_000, 22).unwrap();
    let stego = embed_qim(&carriers[0], 1.0, 23).unwrap();
    let p = common::parity_chi_square(
        common::parity_counts(&[&covers[0]]),
        common::parity_counts(&[&stego]),
    );
    assert!(p < 1e-6, "p = {p}");

    let pitch = gen_cover(2, DescriptorKind::Pitch, 10_000, 24).unwrap();
    let stego = embed_pms(&pitch[1], 1.0, 25).unwrap();
    let p = common::parity_chi_square(
        common::parity_counts(&[&pitch[0]]),
        common::parity_counts(&[&stego]),
    );
    assert!(p < 1e-6, "pitch p = {p}");
}

#[test]
fn segmentation_drops_the_remainder() {
    let stream = &gen_cover(1, DescriptorKind::Lsp, 1_234, 2).unwrap()[0];
    for (length, frames) in [(0.1, 10), (0.5, 50), (1.0, 100), (0.37, 37)] {
        let segs = segment_frames(stream, length).unwrap();
        let used: usize = segs.iter().map(VoipSegment::frames).sum();
        assert_eq!(used, frames * segs.len());
        assert!(1_234 - used < frames);
        for (k, s) in segs.iter().enumerate() {
            assert_eq!(s.matrix, stream.matrix.slice_frames(k * frames, frames).unwrap());
        }
    }
}

#[test]
fn generators_are_pure_functions_of_the_seed() {
    let vocab = DescriptorKind::Lsp.default_vocab();
    let model = CoverModel::default();
    let a = model.generate_segments(DescriptorKind::Lsp, &vocab, 4, 30, 77).unwrap();
    let b = model.generate_segments(DescriptorKind::Lsp, &vocab, 4, 30, 77).unwrap();
    let c = model.generate_segments(DescriptorKind::Lsp, &vocab, 4, 30, 78).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(embed_qim(&a[0], 0.5, 1).unwrap(), embed_qim(&b[0], 0.5, 1).unwrap());
}

#[test]
fn dataset_files_round_trip_and_reject_bad_values() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("set.txt");
    let mut segs = gen_cover(3, DescriptorKind::Pitch, 12, 4).unwrap();
    segs[1] = embed_pms(&segs[1], 0.5, 6).unwrap();
    let header = DatasetHeader::new(DescriptorKind::Pitch, 4);
    write_dataset(&path, &header, &segs).unwrap();
    let (h, back) = read_dataset(&path).unwrap();
    assert_eq!(h, header);
    assert_eq!(back, segs);

    write_dataset(&path, &header, &[]).unwrap();
    assert!(read_dataset(&path).unwrap().1.is_empty());

    let text = std::fs::read_to_string(dir.path().join("set.txt")).unwrap();
    let bad = format!("{text}x\t0\t0\t0.01\t1 2 3 144\n");
    std::fs::write(&path, bad).unwrap();
    assert!(read_dataset(&path).is_err());
    assert!(read_dataset(dir.path().join("missing.txt")).is_err());
}
