use std::{fs, path::Path};

use ffce::{
    checkpoint::Checkpoint,
    error::Error,
    manifest::{Dataset, Manifest},
    sample::{extract_slice_sample, presence_vector, stack_planes},
    synth::{generate, write_dataset, SynthConfig},
    train::{TrainConfig, Trainer},
    volume::{LabelVolume, Volume},
};
use ffce_core::NetworkConfig;
use proptest::prelude::*;

fn dims() -> impl Strategy<Value = [usize; 3]> {
    [1usize..5, 1usize..5, 1usize..5]
}

proptest! {
    #[test]
    fn volume_roundtrip_is_bit_exact((d, data) in dims().prop_flat_map(|d| (Just(d), prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), d.iter().product::<usize>())))) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.mvol");
        let v = Volume::new(d, data).unwrap();
        v.write(&path).unwrap();
        let back = Volume::read(&path).unwrap();
        prop_assert_eq!(back.dims, d);
        let bits = |x: &Volume| x.data.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&v));
        prop_assert_eq!(fs::read(&path).unwrap(), v.to_bytes());
    }

    #[test]
    fn label_roundtrip_is_exact((d, data) in dims().prop_flat_map(|d| (Just(d), prop::collection::vec(any::<u16>(), d.iter().product::<usize>())))) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.mvol");
        let l = LabelVolume::new(d, data).unwrap();
        l.write(&path).unwrap();
        prop_assert_eq!(LabelVolume::read(&path).unwrap(), l);
    }

    #[test]
    fn stack_window_matches_brute_force(depth in 1usize..20, stack in 1usize..12, seed in any::<usize>()) {
        let i = seed % depth;
        let lo = i as isize - ((stack as isize - 1) / 2);
        let hi = i as isize + (stack as isize) / 2;
        let brute: Vec<usize> = (lo..=hi).map(|p| p.clamp(0, depth as isize - 1) as usize).collect();
        prop_assert_eq!(brute.len(), stack);
        prop_assert_eq!(stack_planes(i, stack, depth), brute);
    }

    #[test]
    fn presence_matches_pixel_scan(gt in prop::collection::vec(0u16..6, 1..40)) {
        let p = presence_vector(&gt, 6);
        for (l, &v) in p.iter().enumerate() {
            prop_assert_eq!(v == 1.0, gt.iter().any(|&g| g as usize == l));
        }
    }
}

#[test]
fn header_element_count() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.mvol");
    let bytes = Volume::new([2, 3, 4], vec![1.0; 24]).unwrap().to_bytes();
    fs::write(&path, &bytes).unwrap();
    assert_eq!(Volume::read(&path).unwrap().dims, [2, 3, 4]);
    fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    match Volume::read(&path) {
        Err(Error::Format { message, .. }) => assert!(message.contains("payload size 92 bytes"), "{message}"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(LabelVolume::read(&path), Err(Error::Format { offset: 5, .. })));
    assert!(matches!(
        Volume::read(dir.path().join("missing.mvol")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn slice_samples_cover_every_plane() {
    let pairs = generate(&SynthConfig {
        seed: 1,
        volumes: 2,
        dims: [10, 16, 16],
        classes: 3,
    })
    .unwrap();
    let data = Dataset::new(pairs, 3, 4).unwrap();
    assert_eq!(data.len(), 20);
    for k in 0..data.len() {
        let s = data.sample(k).unwrap();
        let (img, lab) = &data.volumes[s.volume];
        assert_eq!((s.volume, s.index), (k / 10, k % 10));
        assert_eq!(s.slice, img.plane(s.index));
        assert_eq!(s.presence, presence_vector(&s.gt, 3));
        let centre = (4 - 1) / 2;
        assert_eq!(&s.stack[centre * 256..(centre + 1) * 256], img.plane(s.index));
        assert_eq!(s.gt, lab.plane(s.index));
    }
    assert!(data.sample(20).is_err());
    let (img, lab) = &data.volumes[0];
    let s = extract_slice_sample(img, lab, 0, 4, 3).unwrap();
    let expected: Vec<f32> = [0, 0, 1, 2].iter().flat_map(|&p| img.plane(p).to_vec()).collect();
    assert_eq!(s.stack, expected);
}

#[test]
fn synthetic_dataset_files_are_deterministic() {
    let config = SynthConfig {
        seed: 7,
        volumes: 3,
        dims: [16, 16, 16],
        classes: 4,
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = write_dataset(&config, a.path()).unwrap();
    write_dataset(&config, b.path()).unwrap();
    let mut names: Vec<_> = fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 7);
    for name in &names {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap()
        );
    }
    let manifest = Manifest::read(&ma).unwrap();
    assert_eq!(manifest.entries.len(), 3);
    let data = Dataset::load(&manifest, 4, 4).unwrap();
    let mut seen = vec![0.0f32; 4];
    for k in 0..data.len() {
        for (s, p) in seen.iter_mut().zip(data.sample(k).unwrap().presence) {
            *s = s.max(p);
        }
    }
    assert_eq!(seen, vec![1.0; 4]);
}

#[test]
fn manifest_rejects_mismatched_pairs() {
    let dir = tempfile::tempdir().unwrap();
    Volume::new([2, 2, 2], vec![0.0; 8])
        .unwrap()
        .write(dir.path().join("a.mvol"))
        .unwrap();
    LabelVolume::new([2, 2, 1], vec![0; 4])
        .unwrap()
        .write(dir.path().join("b.mvol"))
        .unwrap();
    fs::write(dir.path().join("m.tsv"), "a.mvol\tb.mvol\n").unwrap();
    let m = Manifest::read(dir.path().join("m.tsv")).unwrap();
    assert!(Dataset::load(&m, 2, 1).is_err());
}

fn tiny_trainer() -> Trainer {
    let network = NetworkConfig {
        num_classes: 3,
        stack_depth: 2,
        channels: 4,
        codewords: 2,
        kernel_size: 3,
        ..NetworkConfig::default()
    };
    Trainer::new(network, TrainConfig::default()).unwrap()
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ffck");
    let ckpt = Checkpoint::from_trainer(&tiny_trainer());
    ckpt.write(&path).unwrap();
    let back = Checkpoint::read(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes(), fs::read(&path).unwrap());
    let restored = back.into_trainer().unwrap();
    assert_eq!(restored.net.store(), tiny_trainer().net.store());
}

#[test]
fn checkpoint_corruption_is_rejected() {
    let bytes = Checkpoint::from_trainer(&tiny_trainer()).to_bytes();
    let p = Path::new("c.ffck");
    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(matches!(
        Checkpoint::from_bytes(&bad, p),
        Err(Error::Format { offset: 4, .. })
    ));
    bad = bytes.clone();
    bad[0] = b'M';
    assert!(matches!(
        Checkpoint::from_bytes(&bad, p),
        Err(Error::Format { offset: 0, .. })
    ));
    for cut in [3, 40, bytes.len() / 2, bytes.len() - 1] {
        match Checkpoint::from_bytes(&bytes[..cut], p) {
            Err(Error::Format { message, .. }) => assert!(message.contains("truncated"), "{message}"),
            other => panic!("cut {cut}: {other:?}"),
        }
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(Checkpoint::from_bytes(&long, p).is_err());
}

#[test]
fn checkpoint_network_mismatch_is_rejected() {
    let ckpt = Checkpoint::from_trainer(&tiny_trainer());
    let mut other = ckpt.network.clone();
    other.codewords = 3;
    assert!(ckpt.check_network(&other).is_err());
    assert!(ckpt.check_network(&ckpt.network).is_ok());
    let mut forged = ckpt.clone();
    forged.network = other;
    assert!(forged.network().is_err());
}
