use adaptkit::io::*;
use adaptkit::model::{ArchKind, ModelConfig, NamedCheckpoint};
use adaptkit::surgery::adapt_balanced;
use adaptkit::Error;

fn toy() -> NamedCheckpoint {
    let src = NamedCheckpoint::init_random(ArchKind::decoder_only(ModelConfig::new(2, 16, 32, 4, 2, 4)), 1).unwrap();
    let mut c = adapt_balanced(&src).unwrap();
    c.meta_mut().step = 17;
    c.meta_mut().objective = Some("ul2".into());
    c
}

fn payload_start(buf: &[u8]) -> (usize, usize) {
    let m = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    (16 + m, (16 + m).div_ceil(64) * 64)
}

/// Rewrites the manifest through `edit` and re-lays the file around it.
fn edit_manifest(buf: &[u8], edit: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
    let (mend, payload) = payload_start(buf);
    let mut manifest: serde_json::Value = serde_json::from_slice(&buf[16..mend]).unwrap();
    edit(&mut manifest);
    let json = serde_json::to_vec_pretty(&manifest).unwrap();
    let mut out = buf[..8].to_vec();
    out.extend((json.len() as u64).to_le_bytes());
    out.extend(&json);
    out.resize((16 + json.len()).div_ceil(64) * 64, 0);
    out.extend(&buf[payload..]);
    out
}

#[test]
fn round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.edsg");
    let c = toy();
    save_checkpoint(&c, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert!(back.same_tensors(&c));
    assert_eq!(back.meta(), c.meta());
    assert_eq!(encode_checkpoint(&back).unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn layout_is_aligned() {
    let buf = encode_checkpoint(&toy()).unwrap();
    assert_eq!(&buf[..4], b"EDSG");
    assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
    let (mend, payload) = payload_start(&buf);
    let manifest: serde_json::Value = serde_json::from_slice(&buf[16..mend]).unwrap();
    assert_eq!(payload % 64, 0);
    for (_, e) in manifest["tensors"].as_object().unwrap() {
        assert_eq!(e["offset"].as_u64().unwrap() % 64, 0);
        assert_eq!(e["dtype"], "f32");
    }
}

#[test]
fn truncation_and_garbage_are_format_errors() {
    let buf = encode_checkpoint(&toy()).unwrap();
    for cut in [0, 3, 15, 40, buf.len() / 2, buf.len() - 1] {
        assert!(matches!(decode_checkpoint(&buf[..cut]), Err(Error::Format(_))), "cut {cut}");
    }
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
    let mut bad = buf.clone();
    bad[4] = 9;
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
    let mut bad = buf.clone();
    bad[20] = b'}';
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));

    let (_, payload) = payload_start(&buf);
    let mut nan = buf.clone();
    nan[payload..payload + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(matches!(decode_checkpoint(&nan), Err(Error::Format(_))));
}

#[test]
fn manifest_corruption_is_caught() {
    let buf = encode_checkpoint(&toy()).unwrap();
    let reshaped = edit_manifest(&buf, |m| {
        m["tensors"]["dec.1.attn.q"]["shape"] = serde_json::json!([32, 8]);
    });
    match decode_checkpoint(&reshaped) {
        Err(Error::Validation { name, .. }) => assert_eq!(name, "dec.1.attn.q"),
        other => panic!("expected validation error, got {other:?}"),
    }

    let overlap = edit_manifest(&buf, |m| {
        let off = m["tensors"]["dec.0.attn.k"]["offset"].clone();
        m["tensors"]["dec.0.attn.q"]["offset"] = off;
    });
    assert!(matches!(decode_checkpoint(&overlap), Err(Error::Format(_))));

    let misaligned = edit_manifest(&buf, |m| {
        m["tensors"]["emb.tok"]["offset"] = serde_json::json!(4);
    });
    assert!(matches!(decode_checkpoint(&misaligned), Err(Error::Format(_))));

    let dtype = edit_manifest(&buf, |m| {
        m["tensors"]["emb.tok"]["dtype"] = serde_json::json!("f16");
    });
    assert!(matches!(decode_checkpoint(&dtype), Err(Error::Format(_))));

    let missing = edit_manifest(&buf, |m| {
        m["tensors"].as_object_mut().unwrap().remove("dec.0.xattn.v");
    });
    assert!(matches!(decode_checkpoint(&missing), Err(Error::Validation { .. })));
}

#[test]
fn failed_load_leaves_existing_file_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.edsg");
    std::fs::write(&path, b"EDSG").unwrap();
    assert!(load_checkpoint(&path).is_err());
    assert!(matches!(load_checkpoint(&dir.path().join("none")), Err(Error::Io { .. })));
}

const MINIMAL: &str = r#"
output_dir = "out"
seed = 3

[model]
preset = "S-S"

[data]
synthetic = { num_sequences = 40, seq_len = 16, alphabet = 8, topics = 2, branching = 2, seed = 0 }

[schedule]
total_steps = 4
batch_size = 2
eval_every = 2
"#;

#[test]
fn run_config_parsing_and_validation() {
    let cfg = RunConfig::from_toml(MINIMAL).unwrap();
    assert_eq!(cfg.schedule.total_steps, 4);
    assert_eq!(cfg.model.resolve().unwrap(), ArchKind::from_preset("S-S").unwrap());
    let again = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(again, cfg);

    let unknown = MINIMAL.replace("seed = 3", "seed = 3\nsede = 4");
    assert!(matches!(RunConfig::from_toml(&unknown), Err(Error::Config(_))));
    let nested = MINIMAL.replace("eval_every = 2", "eval_every = 2\nwarmup = 3");
    assert!(matches!(RunConfig::from_toml(&nested), Err(Error::Config(_))));
    let huge = MINIMAL.replace("\"S-S\"", "\"2B\"");
    assert!(matches!(RunConfig::from_toml(&huge), Err(Error::Config(_))));
    let allowed = huge.replace("seed = 3", "seed = 3\nallow_huge = true");
    assert!(RunConfig::from_toml(&allowed).is_ok());
    let bad_preset = MINIMAL.replace("\"S-S\"", "\"M\"");
    assert!(matches!(RunConfig::from_toml(&bad_preset), Err(Error::Config(_))));
    let no_data = MINIMAL.replace("synthetic =", "bogus_unused =");
    assert!(RunConfig::from_toml(&no_data).is_err());
    let zero_steps = MINIMAL.replace("total_steps = 4", "total_steps = 0");
    assert!(matches!(RunConfig::from_toml(&zero_steps), Err(Error::Config(_))));
}

#[test]
fn config_runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let toml = MINIMAL
        .replace("\"S-S\"", "\"S\"")
        .replace("[model]", "[model]\narch = { kind = \"decoder_only\", config = { num_layers = 1, d_model = 16, d_ffn = 32, q_heads = 4, kv_heads = 2, d_head = 4, vocab_size = 362 } }")
        .replace("preset = \"S\"\n", "");
    let path = dir.path().join("run.toml");
    std::fs::write(&path, &toml).unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.output_dir, dir.path().join("out"));

    let first = run_config(&cfg, vec!["train".into()]).unwrap();
    let files = RunFiles::new(&cfg);
    let log1 = std::fs::read_to_string(&files.metrics).unwrap();
    assert_eq!(log1.lines().count(), 1 + 2 * 2);
    let rec = ReproRecord::load(&files.repro).unwrap();
    assert_eq!(rec.seeds["init"], 3);
    assert_eq!(rec.outputs[&files.metrics.display().to_string()], hash_file(&files.metrics).unwrap());

    // Re-running from the recorded config reproduces the log exactly.
    let replay: RunConfig = serde_json::from_value(rec.config.clone()).unwrap();
    let second = run_config(&replay, vec!["train".into()]).unwrap();
    assert_eq!(std::fs::read_to_string(&files.metrics).unwrap(), log1);
    assert!(first.checkpoint.same_tensors(&second.checkpoint));
    assert!(load_checkpoint(&files.checkpoint).unwrap().same_tensors(&second.checkpoint));
}

#[test]
fn content_hash_is_git_style() {
    // `git hash-object` layout, hashed with sha256.
    assert_eq!(
        content_hash(b""),
        "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
    );
}

#[test]
fn silent_edits_are_caught_by_digests() {
    let buf = encode_checkpoint(&toy()).unwrap();
    let (_, payload) = payload_start(&buf);
    let mut flipped = buf.clone();
    flipped[payload + 5] ^= 0x01;
    assert!(matches!(decode_checkpoint(&flipped), Err(Error::Format(_))));

    let restepped = edit_manifest(&buf, |m| m["meta"]["step"] = serde_json::json!(18));
    assert!(matches!(decode_checkpoint(&restepped), Err(Error::Format(_))));
    let untouched = edit_manifest(&buf, |_| {});
    assert!(decode_checkpoint(&untouched).is_ok());
}
