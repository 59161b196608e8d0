use std::net::TcpListener;
use std::sync::Arc;

use occaug_core::backend::wire::{self, Request};
use occaug_core::backend::{
    FeatureCache, FeatureRequest, GenerativeBackend, InpaintRequest, MockBackend, RemoteBackend,
};
use occaug_core::model::ModelConfig;
use occaug_core::{seed, BinaryMask, Error, Image, ImageId, LabelTable, OcclusionClassifier, RunCheckpoint, TrainConfig};
use proptest::prelude::*;
use rand::Rng;

fn spawn_server() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    std::thread::spawn(move || wire::serve_tcp(Arc::new(MockBackend::new()), listener));
    addr
}

fn image(seed_: u64, w: u32, h: u32) -> Image {
    let mut rng = seed::rng(seed_);
    Image::new(w, h, 3, (0..(w * h * 3) as usize).map(|_| rng.random()).collect()).unwrap()
}

#[test]
fn remote_matches_in_process_mock() {
    let remote = RemoteBackend::connect(&spawn_server()).unwrap();
    let local = MockBackend::new();
    assert_eq!(remote.capabilities().unwrap(), local.capabilities().unwrap());
    assert_eq!(remote.parameter_checksum().unwrap(), local.parameter_checksum().unwrap());
    for s in 0..4 {
        let img = image(s, 16, 24);
        let req = InpaintRequest {
            image: img.clone(),
            mask: BinaryMask::from_fn(16, 24, |x, y| (x * y + s as u32) % 3 == 0),
            prompt: "A class of crate".into(),
            seed: s,
            steps: 2,
        };
        assert_eq!(remote.inpaint(&req).unwrap(), local.inpaint(&req).unwrap());
        let f = FeatureRequest {
            image: img,
            prompt: String::new(),
            timestep: 10,
            tap: "mid".into(),
            seed: s,
        };
        assert_eq!(remote.extract_features(&f).unwrap(), local.extract_features(&f).unwrap());
    }
}

#[test]
fn remote_errors_keep_their_kind() {
    let remote = RemoteBackend::connect(&spawn_server()).unwrap();
    let bad = FeatureRequest {
        image: image(1, 12, 16),
        prompt: String::new(),
        timestep: 10,
        tap: "mid".into(),
        seed: 0,
    };
    let err = remote.extract_features(&bad).unwrap_err();
    assert!(matches!(err, Error::Capability(_)), "{err}");
    let unknown_tap = FeatureRequest {
        image: image(1, 16, 16),
        tap: "up_9".into(),
        ..bad
    };
    assert!(remote.extract_features(&unknown_tap).unwrap_err().to_string().contains("valid taps"));
}

#[test]
fn connection_refused_is_reported() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    drop(listener);
    assert!(RemoteBackend::connect(&addr).is_err());
}

#[test]
fn feature_cache_reuses_extractions() {
    let dir = tempfile::tempdir().unwrap();
    let backend = MockBackend::new();
    let req = FeatureRequest {
        image: image(3, 16, 16),
        prompt: String::new(),
        timestep: 50,
        tap: "mid".into(),
        seed: 0,
    };
    let mut cache = FeatureCache::open(dir.path()).unwrap();
    let a = cache.get_or_extract(&backend, ImageId(5), &req).unwrap();
    assert_eq!(cache.len(), 1);
    let reopened = FeatureCache::open(dir.path()).unwrap();
    assert_eq!(reopened.len(), 1);
    let mut reopened = reopened;
    let b = reopened.get_or_extract(&backend, ImageId(5), &req).unwrap();
    assert_eq!(a, b);
}

#[test]
fn fused_checkpoint_needs_backend_at_eval() {
    let config = TrainConfig::default();
    let model = OcclusionClassifier::new(
        &ModelConfig {
            backbone: config.backbone.clone(),
            num_classes: 2,
            diffusion_dim: Some(8),
            projection_dim: None,
            mask_grid: 8,
        },
        0,
    )
    .unwrap();
    let ckpt = RunCheckpoint {
        model,
        labels: LabelTable::new(vec!["a".into(), "b".into()]).unwrap(),
        config,
        metrics: Vec::new(),
        backend_checksum: None,
    };
    let dir = tempfile::tempdir().unwrap();
    image(1, 64, 64).save(dir.path().join("a/x.png")).unwrap();
    let err = occaug_core::eval::evaluate_real_folder(&ckpt, dir.path(), None, None).unwrap_err();
    assert!(err.to_string().contains("--backend"), "{err}");
}

proptest! {
    #[test]
    fn inpaint_request_round_trips(w in 1u32..12, h in 1u32..12, s in any::<u64>(), steps in 0u32..100, prompt in "[a-z ]{0,20}") {
        let req = Request::Inpaint(InpaintRequest {
            image: image(s, w, h),
            mask: BinaryMask::from_fn(w, h, |x, y| (x ^ y ^ s as u32) & 1 == 0),
            prompt,
            seed: s,
            steps,
        });
        prop_assert_eq!(Request::decode(&req.encode()).unwrap(), req);
    }

    #[test]
    fn truncated_frames_are_rejected(cut in 0usize..40) {
        let req = Request::Features(FeatureRequest {
            image: image(1, 4, 4),
            prompt: "p".into(),
            timestep: 3,
            tap: "mid".into(),
            seed: 9,
        });
        let buf = req.encode();
        let cut = cut.min(buf.len() - 1);
        prop_assert!(Request::decode(&buf[..cut]).is_err());
    }
}
