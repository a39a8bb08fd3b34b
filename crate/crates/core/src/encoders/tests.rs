use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::audio::{MelSpectrogram, N_MELS, SEGMENT_FRAMES};
use crate::midi::{BarFlag, CpNote, TokenSequence};
use crate::text::{TextTokenIds, BEGIN_ID, END_ID, PAD_ID};

const VOCAB: usize = 40;

fn desk() -> EncoderConfig {
    EncoderConfig::preset(Preset::Desk, VOCAB)
}

/// Smaller than desk so the gradient tests stay quick.
fn tiny() -> EncoderConfig {
    let mut c = desk();
    c.audio.stem_channels = 8;
    c.audio.block_widths = vec![8, 8, 16, 16];
    c.audio.groups = 4;
    c.symbolic.transformer = TransformerConfig {
        layers: 1,
        hidden_dim: 16,
        heads: 2,
        ff_dim: 32,
    };
    c.text.transformer = c.symbolic.transformer.clone();
    c.joint_dim = 32;
    c
}

fn random_mel(rng: &mut ChaCha8Rng) -> MelSpectrogram {
    MelSpectrogram {
        values: (0..N_MELS * SEGMENT_FRAMES).map(|_| rng.gen_range(-20.0..5.0)).collect(),
        frames: SEGMENT_FRAMES,
    }
}

fn random_sequence(rng: &mut ChaCha8Rng, len: usize) -> TokenSequence {
    let notes = (0..len)
        .map(|i| CpNote {
            bar: if i % 4 == 0 { BarFlag::New } else { BarFlag::Cont },
            position: rng.gen_range(0..16),
            pitch: rng.gen_range(0..128),
            duration: rng.gen_range(1..=64),
        })
        .collect();
    TokenSequence::from_notes(notes)
}

fn random_text(rng: &mut ChaCha8Rng, len: usize) -> TextTokenIds {
    let mut ids = vec![BEGIN_ID];
    ids.extend((0..len).map(|_| rng.gen_range(4..VOCAB as u32)));
    ids.push(END_ID);
    TextTokenIds { ids }
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b)
        .unwrap()
        .abs()
        .unwrap()
        .max_all()
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
}

fn norms(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64)
        .unwrap()
        .sqr()
        .unwrap()
        .sum(1)
        .unwrap()
        .sqrt()
        .unwrap()
        .to_vec1()
        .unwrap()
}

#[test]
fn desk_parameter_count_matches_layer_shapes() {
    let c = desk();
    let m = TriModel::new(&c, 0).unwrap();
    assert_eq!(m.params.count(), c.param_count());
    assert!(c.param_count() < 10_000_000, "{}", c.param_count());
    assert!(c.audio.param_count(512) < 10_000_000);
    assert_eq!(m.params.count_prefix("audio."), c.audio.param_count(512));
    // the full preset is far larger; only its analytic count is checked
    assert!(EncoderConfig::preset(Preset::Paper, 50_000).param_count() > 100_000_000);
}

#[test]
fn all_encoders_emit_unit_vectors() {
    let m = TriModel::new(&desk(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mels: Vec<_> = (0..3).map(|_| random_mel(&mut rng)).collect();
    let seqs: Vec<_> = [0, 5, 300].iter().map(|&n| random_sequence(&mut rng, n)).collect();
    let texts: Vec<_> = [0, 3, 75].iter().map(|&n| random_text(&mut rng, n)).collect();
    let za = m.embed_audio(&mels.iter().collect::<Vec<_>>()).unwrap();
    let zm = m.embed_symbolic(&seqs.iter().collect::<Vec<_>>()).unwrap();
    let zt = m.embed_text(&texts.iter().collect::<Vec<_>>()).unwrap();
    for z in [&za, &zm, &zt] {
        assert_eq!(z.dims()[1], JOINT_DIM);
        for n in norms(z) {
            assert!((n - 1.0).abs() <= 1e-5, "norm {n}");
        }
    }
    let e = m.encode_text(&texts[0]).unwrap();
    assert_eq!(e.modality, Modality::Text);
    assert!((e.norm() - 1.0).abs() <= 1e-5);
}

#[test]
fn inference_is_deterministic() {
    let m = TriModel::new(&desk(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mel = random_mel(&mut rng);
    assert_eq!(m.encode_audio(&mel).unwrap(), m.encode_audio(&mel.clone()).unwrap());
    let m2 = TriModel::new(&desk(), 3).unwrap();
    assert_eq!(m.digest().unwrap(), m2.digest().unwrap());
    let m3 = TriModel::new(&desk(), 4).unwrap();
    assert_ne!(m.digest().unwrap(), m3.digest().unwrap());
}

#[test]
fn symbolic_pooling_uses_exactly_the_real_tokens() {
    let m = TriModel::new(&desk(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let seq = random_sequence(&mut rng, 10);
    let batch = m.symbolic_batch(&[&seq]).unwrap();
    let hidden = m.symbolic.hidden_states(&batch, Precision::Single).unwrap();
    let pooled = m.symbolic.pooled(&batch, Precision::Single).unwrap();
    let manual = hidden.narrow(1, 0, 10).unwrap().mean(1).unwrap();
    assert!(max_abs_diff(&pooled, &manual) < 1e-6);
}

#[test]
fn all_pad_sequence_embeds_projection_bias() {
    let m = TriModel::new(&desk(), 7).unwrap();
    let empty = TokenSequence::empty();
    let batch = m.symbolic_batch(&[&empty]).unwrap();
    let pooled = m.symbolic.pooled(&batch, Precision::Single).unwrap();
    assert_eq!(pooled.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
    let z = m.encode_symbolic(&empty).unwrap();
    assert!((z.norm() - 1.0).abs() <= 1e-5);
}

#[test]
fn masked_positions_do_not_leak() {
    let m = TriModel::new(&desk(), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let seq = random_sequence(&mut rng, 12);
    let long = random_sequence(&mut rng, 100);
    let row = |s: &TokenSequence| -> (Vec<[u32; 4]>, Vec<bool>) {
        (s.tokens().iter().map(|t| t.field_ids()).collect(), s.pad_mask())
    };
    let base = SymbolicBatch::from_fields(&[row(&seq), row(&long)], &m.device).unwrap();
    // scribble valid ids under the mask; the longer row keeps them inside the batch
    let (mut fields, pad) = row(&seq);
    for f in fields.iter_mut().skip(12) {
        *f = [rng.gen_range(0..3), rng.gen_range(0..17), rng.gen_range(0..129), rng.gen_range(0..65)];
    }
    let noisy = SymbolicBatch::from_fields(&[(fields, pad), row(&long)], &m.device).unwrap();
    let a = m.symbolic.forward(&base, Precision::Single).unwrap();
    let b = m.symbolic.forward(&noisy, Precision::Single).unwrap();
    assert!(max_abs_diff(&a, &b) <= 1e-6);
    let alone = m.embed_symbolic(&[&seq]).unwrap();
    assert!(max_abs_diff(&alone, &a.narrow(0, 0, 1).unwrap()) <= 1e-6);

    let t = random_text(&mut rng, 6);
    let mut padded = t.clone();
    padded.ids.extend([PAD_ID; 20]);
    let a = m.embed_text(&[&t]).unwrap();
    let b = m.embed_text(&[&padded]).unwrap();
    assert!(max_abs_diff(&a, &b) <= 1e-6);
    // batching with a longer text must not change a shorter row either
    let long = random_text(&mut rng, 60);
    let c = m.embed_text(&[&t, &long]).unwrap().narrow(0, 0, 1).unwrap();
    assert!(max_abs_diff(&a, &c) <= 1e-6);
}

#[test]
fn projections_are_modality_specific() {
    let m = TriModel::new(&desk(), 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let seq = random_sequence(&mut rng, 20);
    let text = random_text(&mut rng, 5);
    let mel = random_mel(&mut rng);
    let before = (
        m.encode_symbolic(&seq).unwrap(),
        m.encode_text(&text).unwrap(),
        m.encode_audio(&mel).unwrap(),
    );
    let w = m.params.var("audio.projection.weight").unwrap();
    m.params.assign("audio.projection.weight", &(w.as_tensor() * 3.0).unwrap().sin().unwrap()).unwrap();
    assert_eq!(m.encode_symbolic(&seq).unwrap(), before.0);
    assert_eq!(m.encode_text(&text).unwrap(), before.1);
    assert_ne!(m.encode_audio(&mel).unwrap(), before.2);
}

#[test]
fn every_parameter_gets_a_gradient() {
    let m = TriModel::new(&tiny(), 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mels: Vec<_> = (0..4).map(|_| random_mel(&mut rng)).collect();
    let seqs: Vec<_> = (0..4).map(|i| random_sequence(&mut rng, 5 + i)).collect();
    let texts: Vec<_> = (0..4).map(|i| random_text(&mut rng, 2 + i)).collect();
    let za = m.embed_audio(&mels.iter().collect::<Vec<_>>()).unwrap();
    let zm = m.embed_symbolic(&seqs.iter().collect::<Vec<_>>()).unwrap();
    let zt = m.embed_text(&texts.iter().collect::<Vec<_>>()).unwrap();
    let loss = crate::contrastive::trimodal_loss_tensor(&za, &zm, &zt, m.temperature.log_inv_tau()).unwrap();
    let grads = loss.backward().unwrap();
    for (name, var) in m.params.iter() {
        let g = grads.get(var.as_tensor()).unwrap_or_else(|| panic!("{name} has no gradient"));
        let mag = g.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(mag > 0.0, "{name} has a zero gradient");
    }
}

#[test]
fn checkpoint_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let m = TriModel::new(&tiny(), 14).unwrap();
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.config, m.config);
    assert_eq!(back.params.to_host().unwrap(), m.params.to_host().unwrap());
    assert_eq!(back.digest().unwrap(), m.digest().unwrap());

    let fresh = TriModel::new(&tiny(), 99).unwrap();
    fresh.load_params(&path).unwrap();
    assert_eq!(fresh.digest().unwrap(), m.digest().unwrap());

    let mut other = tiny();
    other.joint_dim = 16;
    let wrong = TriModel::new(&other, 0).unwrap();
    assert!(matches!(wrong.load_params(&path), Err(Error::DigestMismatch { .. })));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
}

#[test]
fn external_weights_load_into_one_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("text.safetensors");
    let src = TriModel::new(&tiny(), 15).unwrap();
    let mut tensors = std::collections::HashMap::new();
    for (name, var) in src.params.iter() {
        if let Some(rest) = name.strip_prefix("text.") {
            tensors.insert(rest.to_string(), var.as_tensor().clone());
        }
    }
    candle_core::safetensors::save(&tensors, &path).unwrap();
    let dst = TriModel::new(&tiny(), 16).unwrap();
    let audio_before = dst.params.var("audio.projection.weight").unwrap().as_tensor().copy().unwrap();
    assert_eq!(dst.load_external_weights(Modality::Text, &path).unwrap(), tensors.len());
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let t = random_text(&mut rng, 4);
    assert_eq!(dst.encode_text(&t).unwrap(), src.encode_text(&t).unwrap());
    let audio_after = dst.params.var("audio.projection.weight").unwrap().as_tensor();
    assert_eq!(max_abs_diff(&audio_before, audio_after), 0.0);
    assert!(dst.load_external_weights(Modality::Audio, &path).is_err());
}

#[test]
fn mixed_precision_stays_close_to_single() {
    let mut m = TriModel::new(&desk(), 18).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mel = random_mel(&mut rng);
    let seq = random_sequence(&mut rng, 30);
    let single = (m.encode_audio(&mel).unwrap(), m.encode_symbolic(&seq).unwrap());
    m.precision = Precision::Mixed;
    let mixed = (m.encode_audio(&mel).unwrap(), m.encode_symbolic(&seq).unwrap());
    for (a, b) in [(&single.0, &mixed.0), (&single.1, &mixed.1)] {
        let dot: f64 = a.vector.iter().zip(&b.vector).map(|(x, y)| (x * y) as f64).sum();
        assert!(dot > 0.99, "cosine {dot}");
        assert!((b.norm() - 1.0).abs() < 1e-3);
    }
}

#[test]
fn wrong_shapes_are_rejected() {
    let m = TriModel::new(&tiny(), 20).unwrap();
    let short = MelSpectrogram {
        values: vec![0.0; 64 * 10],
        frames: 10,
    };
    assert!(matches!(m.encode_audio(&short), Err(Error::Shape(_))));
    let t = TextTokenIds { ids: vec![BEGIN_ID; 80] };
    assert!(matches!(m.encode_text(&t), Err(Error::Shape(_))));
    let bad = TextTokenIds { ids: vec![BEGIN_ID, 1000, END_ID] };
    assert!(matches!(m.encode_text(&bad), Err(Error::Shape(_))));
}
