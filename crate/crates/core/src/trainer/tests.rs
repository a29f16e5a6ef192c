use super::*;
use crate::numerics::ParamId;

fn tiny_train_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 4,
        seed: 3,
        inference: InferenceConfig {
            n_units: 3,
            k_active: 2,
            n_steps: 3,
            d_hidden: 6,
            d_value: 6,
            d_key: 4,
            d_emb: 4,
            d_rel: 2,
            d_rel_out: 4,
            d_attn: 4,
            ..Default::default()
        },
        synth: Some(SynthConfig { n_samples: 10, d_node: 4, vocab_size: 8, n_relations: 2, ..Default::default() }),
        ..Default::default()
    }
}

#[test]
fn schedule_examples() {
    let cfg = TrainConfig::default();
    assert!((lr_schedule(0, &cfg) - 6e-4).abs() < 1e-18);
    assert_eq!(lr_schedule(1, &cfg), 1e-3);
    assert_eq!(lr_schedule(2, &cfg), 1e-3);
    assert_eq!(lr_schedule(29, &cfg), 1e-3);
    let flat = TrainConfig { warmup_factor: 1.0, ..Default::default() };
    assert!((0..5).all(|e| lr_schedule(e, &flat) == 1e-3));
}

#[test]
fn config_invariants() {
    assert!(TrainConfig::default().check().is_ok());
    for bad in [
        TrainConfig { warmup_epochs: 31, ..Default::default() },
        TrainConfig { lr: 0.0, ..Default::default() },
        TrainConfig { batch_size: 0, ..Default::default() },
        TrainConfig { betas: [0.9, 1.0], ..Default::default() },
        TrainConfig { variant: "nope".into(), ..Default::default() },
    ] {
        assert!(bad.check().is_err(), "{bad:?}");
    }
    let t: TrainConfig = serde_json::from_str(r#"{"epochs":5,"inference":{"n_steps":4}}"#).unwrap();
    assert_eq!((t.epochs, t.inference.n_steps, t.batch_size), (5, 4, 32));
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch":5}"#).is_err());
}

fn scalar_store(v: f64, g: f64) -> (ParamStore, ParamId) {
    let mut store = ParamStore::new();
    let id = store.add("x", Matrix::row_vector(&[v]).unwrap());
    let mut tape = Tape::new();
    let x = tape.param(&store, id);
    let y = tape.scale(x, g).unwrap();
    let l = tape.sum_all(y).unwrap();
    tape.backward_into(l, &mut store).unwrap();
    (store, id)
}

#[test]
fn adam_zero_gradient() {
    let (mut store, id) = scalar_store(1.5, 0.0);
    let mut adam = Adam::new(&store);
    adam_step(&mut store, &mut adam, 1e-3, [0.9, 0.999], 1e-8).unwrap();
    assert_eq!(store.value(id).get(0, 0), 1.5);

    adam.m[0] = Matrix::row_vector(&[0.2]).unwrap();
    adam.v[0] = Matrix::row_vector(&[0.5]).unwrap();
    adam_step(&mut store, &mut adam, 1e-3, [0.9, 0.999], 1e-8).unwrap();
    assert!((adam.m[0].get(0, 0) - 0.18).abs() < 1e-15);
    assert!((adam.v[0].get(0, 0) - 0.4995).abs() < 1e-15);
}

#[test]
fn adam_first_step_is_lr_sized() {
    for g in [3.0, -0.01] {
        let (mut store, id) = scalar_store(0.0, g);
        let mut adam = Adam::new(&store);
        adam_step(&mut store, &mut adam, 1e-3, [0.9, 0.999], 1e-8).unwrap();
        let step = store.value(id).get(0, 0);
        assert!((step + 1e-3 * g.signum()).abs() < 1e-8, "{step}");
    }
}

#[test]
fn adam_descends_quadratic() {
    let mut store = ParamStore::new();
    let id = store.add("x", Matrix::row_vector(&[2.0, -1.0]).unwrap());
    let mut adam = Adam::new(&store);
    let objective = |s: &ParamStore| s.value(id).data().iter().map(|x| x * x).sum::<f64>();
    let mut prev = objective(&store);
    for _ in 0..10 {
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum_all(sq).unwrap();
        store.zero_grads();
        tape.backward_into(l, &mut store).unwrap();
        adam_step(&mut store, &mut adam, 0.1, [0.9, 0.999], 1e-8).unwrap();
        let now = objective(&store);
        assert!(now < prev);
        prev = now;
    }
}

#[test]
fn adam_rejects_mismatched_moments() {
    let (mut store, _) = scalar_store(0.0, 1.0);
    let mut adam = Adam { t: 0, m: vec![], v: vec![] };
    assert!(adam_step(&mut store, &mut adam, 1e-3, [0.9, 0.999], 1e-8).is_err());
}

#[test]
fn training_is_deterministic() {
    let cfg = tiny_train_cfg();
    let (meta, samples) = cfg.load_data().unwrap();
    let a = fit(&cfg, &meta, &samples, |_, _, _| Ok(())).unwrap();
    let b = fit(&cfg, &meta, &samples, |_, _, _| Ok(())).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.model.store.values(), b.model.store.values());
    assert_eq!(a.metrics.len(), 3);
    assert!(a.metrics.iter().all(|m| m.loss.is_finite() && (0.0..=1.0).contains(&m.acc)));

    let other = TrainConfig { variant: "no_memory_update".into(), ..cfg };
    let c = fit(&other, &meta, &samples, |_, _, _| Ok(())).unwrap();
    assert_ne!(a.metrics.last().unwrap().loss, c.metrics.last().unwrap().loss);
}

#[test]
fn evaluation_is_read_only_and_recountable() {
    let cfg = tiny_train_cfg();
    let (meta, samples) = cfg.load_data().unwrap();
    let out = fit(&cfg, &meta, &samples, |_, _, _| Ok(())).unwrap();
    let data = prepare_all(&samples, &out.model.dims).unwrap();
    let e1 = evaluate(&out.model, &data, &cfg.loss).unwrap();
    let e2 = evaluate(&out.model, &data, &cfg.loss).unwrap();
    assert_eq!(e1, e2);
    let recount = e1.predictions.iter().filter(|p| samples[p.sample].answer_id() == Some(p.predicted)).count();
    assert_eq!(e1.accuracy, recount as f64 / samples.len() as f64);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let cfg = tiny_train_cfg();
    let (meta, samples) = cfg.load_data().unwrap();
    let out = fit(&cfg, &meta, &samples, |_, _, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    save_checkpoint(&path, &out.model, Some(&out.adam), 3, &cfg).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.epoch, 3);
    assert_eq!(ck.train, cfg);
    assert_eq!(ck.model.store.values(), out.model.store.values());
    assert_eq!(ck.adam.as_ref(), Some(&out.adam));
    let data = prepare_all(&samples, &out.model.dims).unwrap();
    assert_eq!(
        evaluate(&ck.model, &data, &cfg.loss).unwrap(),
        evaluate(&out.model, &data, &cfg.loss).unwrap()
    );

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
}

#[test]
fn train_writes_metrics_and_checkpoint() {
    let cfg = tiny_train_cfg();
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    let parsed: EpochMetrics = serde_json::from_str(lines[2]).unwrap();
    assert_eq!(parsed, out.metrics[2]);
    let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["acc", "epoch", "loss", "lr"]);
    let ck = load_checkpoint(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.model.store.values(), out.model.store.values());
}

#[test]
fn trace_rows_and_aggregates_agree() {
    let cfg = tiny_train_cfg();
    let (meta, samples) = cfg.load_data().unwrap();
    let model = Model::new(cfg.model_config().unwrap(), data_dims(&meta).unwrap(), 1).unwrap();
    let data = prepare_all(&samples[..4], &model.dims).unwrap();
    let rows = trace_run(&model, &data, 2).unwrap();
    assert_eq!(rows.len(), 4 * 5 * 3);
    for chunk in rows.chunks(3) {
        assert_eq!(chunk.iter().map(|r| r.active as usize).sum::<usize>(), 2);
        if chunk[0].step >= 3 {
            assert_eq!(chunk[0].modality, "null");
            assert!(chunk.iter().all(|r| r.input_weight == 0.5));
            assert_eq!(chunk.iter().map(|r| r.active).collect::<Vec<_>>(), [1, 1, 0]);
        }
    }
    let agg = aggregate_trace(&rows);
    for a in &agg {
        let sel: Vec<&TraceRow> = rows.iter().filter(|r| r.modality == a.modality && r.unit == a.unit).collect();
        let f = sel.iter().filter(|r| r.active == 1).count() as f64 / sel.len() as f64;
        assert_eq!(a.frequency, f);
        assert!((0.0..=1.0).contains(&a.frequency));
    }
    assert_eq!(agg.iter().map(|a| a.modality.as_str()).collect::<std::collections::BTreeSet<_>>().len(), 4);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.csv");
    write_trace_csv(&p, &rows).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("sample,step,modality,unit,active,input_weight\n"));
    let mut rd = csv::Reader::from_path(&p).unwrap();
    let back: Vec<TraceRow> = rd.deserialize().map(|r| r.unwrap()).collect();
    assert_eq!(back, rows);
}

#[test]
fn dimension_checks() {
    let cfg = tiny_train_cfg();
    let (meta, samples) = cfg.load_data().unwrap();
    let model = Model::new(cfg.model_config().unwrap(), data_dims(&meta).unwrap(), 1).unwrap();
    assert!(check_dims(&model, &meta, &samples).is_ok());
    let wide = DatasetMeta { d_node: Some(9), ..meta.clone() };
    assert!(check_dims(&model, &wide, &samples).is_err());
    let big_vocab = DatasetMeta { vocab_size: 99, ..meta };
    assert!(check_dims(&model, &big_vocab, &samples).is_err());
}
