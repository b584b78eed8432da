use proptest::prelude::*;
use sha2::{Digest, Sha256};
use xvector::dataio::{
    decode_archive, encode_archive, generate_synthetic, read_archive, write_archive, FeatureArchive, SynthConfig,
};
use xvector::Matrix;

fn encode(a: &FeatureArchive) -> Vec<u8> {
    let mut buf = Vec::new();
    encode_archive(&mut buf, a).unwrap();
    buf
}

fn archive_strategy() -> impl Strategy<Value = FeatureArchive> {
    (1usize..6).prop_flat_map(|dim| {
        prop::collection::vec(
            (0usize..4, prop::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), dim..=dim * 8)),
            0..6,
        )
        .prop_map(move |utts| {
            let mut a = FeatureArchive::new(dim);
            for (i, (spk, values)) in utts.into_iter().enumerate() {
                let rows = values.len() / dim;
                let data: Vec<f64> = values[..rows * dim].iter().map(|&v| v as f64).collect();
                let frames = Matrix::new(rows, dim, data).unwrap();
                a.push(&format!("utt{i}"), &format!("spk{spk}"), &frames).unwrap();
            }
            a
        })
    })
}

proptest! {
    #[test]
    fn archives_round_trip(a in archive_strategy()) {
        let bytes = encode(&a);
        let b = decode_archive(&bytes[..]).unwrap();
        prop_assert_eq!(&b, &a);
        prop_assert_eq!(encode(&b), bytes);
    }

    #[test]
    fn every_truncation_is_rejected(a in archive_strategy(), cut in any::<prop::sample::Index>()) {
        let bytes = encode(&a);
        let n = cut.index(bytes.len());
        prop_assert!(decode_archive(&bytes[..n]).is_err());
    }
}

#[test]
fn files_round_trip_and_generation_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        n_speakers: 5,
        utts_per_speaker: 3,
        ..SynthConfig::default()
    };
    let digest = |path: &std::path::Path| Sha256::digest(std::fs::read(path).unwrap());
    let a = dir.path().join("a.spkf");
    let b = dir.path().join("b.spkf");
    write_archive(&a, &generate_synthetic(&cfg).unwrap()).unwrap();
    write_archive(&b, &generate_synthetic(&cfg).unwrap()).unwrap();
    assert_eq!(digest(&a), digest(&b));
    assert_eq!(read_archive(&a).unwrap(), generate_synthetic(&cfg).unwrap());

    let c = dir.path().join("c.spkf");
    write_archive(&c, &generate_synthetic(&SynthConfig { seed: 1, ..cfg }).unwrap()).unwrap();
    assert_ne!(digest(&a), digest(&c));
}
