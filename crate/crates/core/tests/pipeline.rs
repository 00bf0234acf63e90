use edgeasr::audio::{estimate_stnr, ingest, log_mel, log_mel_frames, write_wav, AudioClip, N_FRAMES_30S, N_MELS};
use edgeasr::compress::{compress_bundle, CompressionMode, CompressionPolicy};
use edgeasr::filter::{read_manifest, run_pipeline, write_manifest, DataVersion, FileProbe, FilterConfig, Split, UtteranceRecord};
use edgeasr::flops::{flops_model, instrumented_count};
use edgeasr::model::{load_bundle, save_bundle, transcribe, ByteTokenizer, ModelBundle, ModelConfig};
use edgeasr::tensor::FlopCounter;
use edgeasr::wer::{corpus_wer, pair_by_id, read_tsv};

fn burst_clip(seconds: f64) -> AudioClip {
    let n = (seconds * 16000.0) as usize;
    AudioClip::from_samples_16k(
        (0..n)
            .map(|i| {
                let on = (i / 8000) % 2 == 0;
                let hiss = ((i * 7919) % 101) as f32 / 101.0 - 0.5;
                hiss * 0.002 + if on { 0.25 * (i as f32 * 0.05).sin() } else { 0.0 }
            })
            .collect(),
    )
}

#[test]
fn stereo_44k_file_becomes_16k_mono_features() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("stereo.wav");
    let spec = hound::WavSpec {
        channels: 2,
        sample_rate: 44_100,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(&p, spec).unwrap();
    for i in 0..(44_100 * 2) {
        let v = ((i as f32 * 0.03).sin() * 8000.0) as i16;
        w.write_sample(v).unwrap();
        w.write_sample(v).unwrap();
    }
    w.finalize().unwrap();
    let clip = ingest(&p).unwrap();
    assert_eq!(clip.sample_rate_hz(), 16_000);
    assert!((clip.duration_s() - 2.0).abs() < 1e-3);
    let mel = log_mel(&clip).unwrap();
    assert_eq!((mel.n_mels(), mel.n_frames()), (N_MELS, N_FRAMES_30S));
}

#[test]
fn bundle_file_round_trip_preserves_transcripts_and_flops() {
    let dir = tempfile::tempdir().unwrap();
    let b = ModelBundle::random(ModelConfig::toy(2, 64, 4), 21).unwrap();
    let p = dir.path().join("b.eakw");
    save_bundle(&b, &p).unwrap();
    let loaded = load_bundle(&p).unwrap();
    assert_eq!(loaded, b);
    let tok = ByteTokenizer::new(b.config.n_vocab);
    let clip = burst_clip(1.0);
    let t1 = transcribe(&b, &clip, &tok, 8, &mut FlopCounter::new()).unwrap();
    let t2 = transcribe(&loaded, &clip, &tok, 8, &mut FlopCounter::new()).unwrap();
    assert_eq!(t1, t2);

    let mel = log_mel_frames(&clip, b.config.n_frames()).unwrap();
    let counted = instrumented_count(&b, &mel, 8).unwrap();
    assert_eq!(counted.transcript, t1);
    assert_eq!(counted.counted_flops, flops_model(&b, t1.n_decoded_tokens).model_flops);
}

#[test]
fn full_energy_compression_is_a_no_op() {
    let b = ModelBundle::random(ModelConfig::toy(2, 32, 2), 5).unwrap();
    let policy = CompressionPolicy {
        threshold_theta: 1.0,
        mode: CompressionMode::WeightSvd,
        ..Default::default()
    };
    let (out, report) = compress_bundle(&b, None, &policy).unwrap();
    assert_eq!(out, b);
    assert_eq!(report.totals.params_saved, 0);
    assert_eq!(flops_model(&out, 5), flops_model(&b, 5));
}

#[test]
fn manifest_from_disk_through_filter_and_scoring() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let speech = d.join("speech.wav");
    write_wav(&speech, &burst_clip(3.0)).unwrap();
    let silent = d.join("silent.wav");
    write_wav(&silent, &AudioClip::silence(3.0)).unwrap();
    assert!(estimate_stnr(&ingest(&speech).unwrap()).unwrap().stnr_db > 3.0);

    let rec = |id: &str, order: usize, audio: &std::path::Path, dur: f64, text: &str| UtteranceRecord {
        utt_id: id.into(),
        session_id: "s".into(),
        split: Split::Train,
        audio_path: audio.to_path_buf(),
        transcript: text.into(),
        duration_s: dur,
        ref_hyp: Some(text.into()),
        order_index: order,
        sources: vec![],
    };
    let m = vec![
        rec("a", 0, &speech, 13.0, "one two three four"),
        rec("quiet", 1, &silent, 13.0, "five six seven"),
        rec("b", 2, &speech, 13.0, "eight nine ten"),
        rec("long", 3, &speech, 31.0, "far too long a turn"),
    ];
    let mp = d.join("m.jsonl");
    write_manifest(&mp, &m).unwrap();
    let m = read_manifest(&mp).unwrap();
    let (out, report) = run_pipeline(&m, &FilterConfig::for_version(DataVersion::C), &FileProbe).unwrap();
    let reasons: Vec<(&str, &str)> = report.stages[0]
        .discarded
        .iter()
        .map(|d| (d.utt_id.as_str(), d.reason.as_str()))
        .collect();
    assert_eq!(reasons, [("quiet", "degenerate signal"), ("long", "longer than 30 s")]);
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].duration_s, 26.0);
    assert_eq!(out[0].transcript, "one two three four eight nine ten");

    let refs = d.join("r.tsv");
    let hyps = d.join("h.tsv");
    std::fs::write(&refs, "p1\tone two three four\np2\tfive six\n").unwrap();
    std::fs::write(&hyps, "p2\tfive six seven\np1\tone too three four\n").unwrap();
    let score = corpus_wer(&pair_by_id(read_tsv(&refs).unwrap(), read_tsv(&hyps).unwrap()).unwrap()).unwrap();
    assert_eq!(score.summary.errors(), 2);
    assert_eq!(score.summary.wer, 2.0 / 6.0);
}
