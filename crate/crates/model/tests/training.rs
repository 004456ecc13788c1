use latte_model::{Checkpoint, MixerKind, ModelConfig, TokenBatch, Trainer};

fn config(kind: MixerKind) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        n_latents: 8,
        window: 4,
        dropout: 0.0,
        learning_rate: 1e-2,
        warmup_steps: 5,
        batch_size: 4,
        seq_len: 16,
        vocab_size: 8,
        mixer_kind: kind,
        ..ModelConfig::default()
    }
}

/// Cyclic sequences `o, o+1, ...` mod 8: every next token is predictable.
fn cyclic(step: usize) -> TokenBatch {
    let (batch, seq) = (4, 16);
    let mut tokens = Vec::new();
    let mut targets = Vec::new();
    for b in 0..batch {
        let offset = (step + 3 * b) % 8;
        for t in 0..seq {
            tokens.push((offset + t) % 8);
            targets.push((offset + t + 1) % 8);
        }
    }
    TokenBatch {
        tokens,
        targets,
        mask: vec![true; batch * seq],
        batch,
        seq,
    }
}

#[test]
fn every_mixer_learns_a_cycle() {
    for kind in MixerKind::ALL {
        let mut trainer = Trainer::<f32>::new(config(kind), 60).unwrap();
        let (first, _) = trainer.train_step(&cyclic(0)).unwrap();
        let mut last = first;
        for step in 1..60 {
            last = trainer.train_step(&cyclic(step)).unwrap().0;
        }
        assert!(last < 0.25 * first, "{kind}: loss {first} -> {last}");
    }
}

#[test]
fn resuming_from_a_checkpoint_is_seamless() {
    let cfg = config(MixerKind::MacchiatoRglru);
    let mut straight = Trainer::<f64>::new(cfg.clone(), 6).unwrap();
    for step in 0..6 {
        straight.train_step(&cyclic(step)).unwrap();
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    let mut first = Trainer::<f64>::new(cfg, 6).unwrap();
    for step in 0..3 {
        first.train_step(&cyclic(step)).unwrap();
    }
    first.checkpoint().save(&path).unwrap();
    let mut resumed = Trainer::from_checkpoint(Checkpoint::<f64>::load(&path).unwrap()).unwrap();
    for step in 3..6 {
        resumed.train_step(&cyclic(step)).unwrap();
    }
    assert_eq!(straight.checkpoint().to_bytes(), resumed.checkpoint().to_bytes());
}
