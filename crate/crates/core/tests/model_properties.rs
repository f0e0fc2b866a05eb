use hsp_core::decoder::{Decoder, DecoderConfig};
use hsp_core::encoder::{lora_forward, Encoder, EncoderConfig};
use hsp_core::loss_metrics::LabelMap;
use hsp_core::model::{ModelConfig, SegModel, Variant};
use hsp_core::numerics::{Graph, Tensor};
use hsp_core::params::{init, ParamStore};
use hsp_core::trainer::{Checkpoint, RunOptions, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        image_size: 32,
        patch_size: 8,
        in_channels: 1,
        width: 16,
        depth: 4,
        global_layers: vec![1, 3],
        heads: 2,
        window_size: 2,
        lora_rank: 2,
        mlp_ratio: 2,
    }
}

fn build_encoder(config: &EncoderConfig) -> (ParamStore<f64>, Encoder) {
    let mut store = ParamStore::new();
    let enc = Encoder::new(config, &mut store, &mut rng(1), &mut rng(2)).unwrap();
    (store, enc)
}

fn embeddings(store: &ParamStore<f64>, enc: &Encoder, image: &Tensor<f64>, backbone: bool) -> Vec<Tensor<f64>> {
    let mut g = Graph::new();
    let p = store.bind_constant(&mut g);
    let x = g.constant(image.clone());
    let vars = if backbone {
        enc.forward_backbone(&mut g, &p, x).unwrap()
    } else {
        let slots = vec![None; enc.config().taps()];
        enc.forward(&mut g, &p, x, &slots).unwrap().embeddings
    };
    vars.into_iter().map(|v| g.value(v).clone()).collect()
}

#[test]
fn factored_lora_matches_materialized_weight() {
    let mut r = rng(10);
    for _ in 0..100 {
        let (n, k, d) = (r.random_range(1..6), r.random_range(2..12), r.random_range(2..12));
        let rank = r.random_range(1..k.min(d));
        let x: Tensor<f64> = init::normal(&mut r, &[n, k], 1.0);
        let w: Tensor<f64> = init::normal(&mut r, &[d, k], 1.0);
        let a: Tensor<f64> = init::normal(&mut r, &[rank, k], 1.0);
        let b: Tensor<f64> = init::normal(&mut r, &[d, rank], 1.0);
        let merged = {
            let delta = b.matmul(&a).unwrap();
            let data = w.data().iter().zip(delta.data()).map(|(x, y)| x + y).collect();
            Tensor::new([d, k], data).unwrap()
        };
        let expected = x.matmul(&merged.transpose().unwrap()).unwrap();
        let mut g = Graph::new();
        let vars = [x, w, a, b].map(|t| g.constant(t));
        let y = lora_forward(&mut g, vars[0], vars[1], vars[2], vars[3]).unwrap();
        assert!(g.value(y).max_abs_diff(&expected).unwrap() < 1e-6);
    }
}

#[test]
fn encoder_with_merged_weights_matches_adapted_encoder() {
    let config = small_encoder();
    let (mut store, enc) = build_encoder(&config);
    let mut r = rng(3);
    for ad in enc.adapters() {
        let shape = store.get(ad.b).shape().to_vec();
        *store.get_mut(ad.b) = init::normal(&mut r, &shape, 0.3);
    }
    let image: Tensor<f64> = init::normal(&mut r, &[1, 32, 32], 1.0);
    let adapted = embeddings(&store, &enc, &image, false);

    let mut merged = store.clone();
    for ad in enc.adapters() {
        *merged.get_mut(ad.base) = ad.merged_weight(&store).unwrap();
    }
    let folded = embeddings(&merged, &enc, &image, true);
    for (a, b) in adapted.iter().zip(&folded) {
        assert!(a.max_abs_diff(b).unwrap() < 1e-6);
    }
}

#[test]
fn zero_b_gives_the_frozen_backbone_exactly() {
    let config = small_encoder();
    let (store, enc) = build_encoder(&config);
    let mut r = rng(4);
    for _ in 0..5 {
        let image: Tensor<f64> = init::normal(&mut r, &[1, 32, 32], 1.0);
        let with = embeddings(&store, &enc, &image, false);
        let without = embeddings(&store, &enc, &image, true);
        for (a, b) in with.iter().zip(&without) {
            assert!(a.bit_eq(b));
        }
    }
}

/// Builds a decoder over `levels` taps and returns it with random embeddings.
fn chain(levels: usize, skip: bool) -> (ParamStore<f64>, Decoder, Vec<Tensor<f64>>) {
    let mut store = ParamStore::new();
    let config = DecoderConfig { width: 8, heads: 2, num_classes: 2 };
    let dec = Decoder::new(&config, &mut store, &mut rng(5), 12, (1..=levels).collect(), skip, 4, 8).unwrap();
    let mut r = rng(6 + levels as u64);
    let emb = (0..levels).map(|_| init::normal(&mut r, &[16, 12], 1.0)).collect();
    (store, dec, emb)
}

fn add(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap()
}

fn scale(a: &Tensor<f64>, s: f64) -> Tensor<f64> {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| x * s).collect()).unwrap()
}

#[test]
fn identity_chain_matches_closed_form() {
    for levels in 1..=3 {
        for skip in [false, true] {
            if skip && levels == 1 {
                continue;
            }
            let (store, dec, emb) = chain(levels, skip);
            let mut g = Graph::new();
            let p = store.bind_constant(&mut g);
            let vars: Vec<_> = emb.iter().map(|t| g.constant(t.clone())).collect();
            let necks: Vec<Tensor<f64>> = (0..levels)
                .map(|l| {
                    let v = dec.neck_project(&mut g, &p, l, vars[l]).unwrap();
                    g.value(v).clone()
                })
                .collect();
            let outs = dec.fuse_chain_with(&mut g, &p, &vars, |_, _, x| Ok(x), levels).unwrap();
            // out_i = sum_{j=i}^{N-1} n_j + (1 + skip * (N - i)) n_N
            for i in 0..levels {
                let deep = levels - 1;
                let mut expect = scale(&necks[deep], 1.0 + if skip { (deep - i) as f64 } else { 0.0 });
                for n in &necks[i..deep] {
                    expect = add(&expect, n);
                }
                assert!(g.value(outs[i]).max_abs_diff(&expect).unwrap() < 1e-6, "N={levels} skip={skip} i={i}");
            }
        }
    }
}

#[test]
fn scaling_stub_chain_matches_recursion() {
    // Distinct per-level stubs catch level mix-ups the identity cannot.
    let levels = 3;
    let (store, dec, emb) = chain(levels, true);
    let mut g = Graph::new();
    let p = store.bind_constant(&mut g);
    let vars: Vec<_> = emb.iter().map(|t| g.constant(t.clone())).collect();
    let necks: Vec<Tensor<f64>> = (0..levels)
        .map(|l| {
            let v = dec.neck_project(&mut g, &p, l, vars[l]).unwrap();
            g.value(v).clone()
        })
        .collect();
    let outs = dec.fuse_chain_with(&mut g, &p, &vars, |g, l, x| g.scale(x, l as f64 + 2.0), levels).unwrap();
    let out3 = scale(&necks[2], 4.0);
    let out2 = scale(&add(&add(&out3, &necks[1]), &out3), 3.0);
    let out1 = scale(&add(&add(&out2, &necks[0]), &out3), 2.0);
    for (got, want) in outs.iter().zip([out1, out2, out3]) {
        assert!(g.value(*got).max_abs_diff(&want).unwrap() < 1e-9);
    }
}

#[test]
fn attention_rows_are_distributions_for_every_variant() {
    for v in Variant::ALL {
        let mut config = ModelConfig::tiny();
        config.architecture = v.architecture();
        let model = SegModel::<f64>::new(&config, 3).unwrap();
        let image: Tensor<f64> = init::normal(&mut rng(8), &[1, 32, 32], 1.0);
        let (logits, records) = model.predict(&image).unwrap();
        assert_eq!(logits.shape(), &[2, 32, 32]);
        assert_eq!(records.is_empty(), !config.architecture.qa_pairs, "{}", v.name());
        for r in &records {
            for row in r.weights.data().chunks(*r.weights.shape().last().unwrap()) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-9 && row.iter().all(|&w| w >= 0.0));
            }
        }
    }
}

fn toy_batch(n: usize) -> (Vec<Tensor<f32>>, Vec<LabelMap>) {
    let mut r = rng(12);
    (0..n)
        .map(|_| {
            let (cy, cx, rad) = (r.random_range(8.0..24.0), r.random_range(8.0..24.0), r.random_range(4.0..9.0f64));
            let labels: Vec<u8> = (0..32 * 32)
                .map(|i| (((i / 32) as f64 - cy).hypot((i % 32) as f64 - cx) < rad) as u8)
                .collect();
            let pixels: Vec<f32> = labels.iter().map(|&l| if l == 1 { 0.75 } else { 0.25 }).collect();
            (Tensor::new([1, 32, 32], pixels).unwrap(), LabelMap::new(32, 32, labels).unwrap())
        })
        .unzip()
}

fn trained(steps: usize, lr: f64) -> Trainer {
    let model = SegModel::<f32>::new(&ModelConfig::tiny(), 9).unwrap();
    let config = TrainConfig { learning_rate: lr, batch_size: 2, ..TrainConfig::default() };
    let mut t = Trainer::new(model, &config, RunOptions { threads: 1 }).unwrap();
    let (images, labels) = toy_batch(4);
    for s in 0..steps {
        let i = (2 * s) % 4;
        t.step(&images[i..i + 2], &labels[i..i + 2]).unwrap();
    }
    t
}

#[test]
fn training_moves_only_trainable_parameters() {
    let before = SegModel::<f32>::new(&ModelConfig::tiny(), 9).unwrap();
    let after = trained(50, 1e-3).model;
    for id in before.store.ids() {
        let (a, b) = (before.store.get(id), after.store.get(id));
        if before.store.is_trainable(id) {
            assert!(!a.bit_eq(b), "{} did not change", before.store.name(id));
        } else {
            assert!(a.bit_eq(b), "{} changed", before.store.name(id));
        }
    }
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let before = SegModel::<f32>::new(&ModelConfig::tiny(), 9).unwrap();
    let after = trained(3, 0.0).model;
    for id in before.store.ids() {
        assert!(before.store.get(id).bit_eq(after.store.get(id)));
    }
}

#[test]
fn checkpoint_round_trip_reproduces_logits() {
    let t = trained(4, 1e-3);
    let ckpt = Checkpoint { model: t.model, train: t.config, adam: t.adam, epoch: 1, history: Vec::new() };
    let bytes = ckpt.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    let image = toy_batch(1).0.remove(0);
    let (a, _) = ckpt.model.predict(&image).unwrap();
    let (b, _) = back.model.predict(&image).unwrap();
    assert!(a.bit_eq(&b));
}

#[test]
fn identical_runs_give_identical_checkpoints() {
    let bytes = || {
        let t = trained(3, 1e-3);
        Checkpoint { model: t.model, train: t.config, adam: t.adam, epoch: 1, history: Vec::new() }.to_bytes()
    };
    assert_eq!(bytes(), bytes());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let t = trained(1, 1e-3);
    let bytes = Checkpoint { model: t.model, train: t.config, adam: t.adam, epoch: 1, history: Vec::new() }.to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    let mut extra = bytes;
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
}
