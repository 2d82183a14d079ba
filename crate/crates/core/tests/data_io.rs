use std::path::{Path, PathBuf};

use avsc::audio::features::{CLIP_SAMPLES, N_FRAMES, N_MAPS, N_MELS};
use avsc::data::*;
use avsc::models::{SceneLabel, N_CLASSES};

fn row(id: &str, samples: usize) -> ManifestRow {
    ManifestRow {
        clip_id: id.to_string(),
        audio_path: format!("audio/{id}.wav"),
        audio_offset: 0,
        num_samples: samples,
        video: VideoSource::Frames(format!("frames/{id}")),
        frames: [0, 14],
        label: SceneLabel::new(3).unwrap(),
        split: Split::Train,
    }
}

fn manifest(rows: Vec<ManifestRow>) -> Manifest {
    Manifest::new(rows, PathBuf::from("/data")).unwrap()
}

#[test]
fn manifest_text_round_trips() {
    let mut r2 = row("b", 48_000);
    r2.video = VideoSource::Embedding("key b".into());
    r2.label = SceneLabel::new(9).unwrap();
    r2.split = Split::Test;
    let m = manifest(vec![row("a", 480_000), r2]);
    let text = m.to_text();
    assert!(text.starts_with("clip_id\taudio_path\taudio_offset\tnum_samples\tvideo_source\tframe_a\tframe_b\tlabel\tsplit\n"));
    assert!(text.contains("urban park\ttest"));
    let back = Manifest::parse(&text, PathBuf::from("/data")).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.to_text(), text);
    assert_eq!(back.rows[1].embedding_key(), "key b");
    assert_eq!(back.rows[0].embedding_key(), "a");
}

#[test]
fn manifest_schema_is_strict() {
    let good = manifest(vec![row("a", 48_000)]).to_text();
    let extra_col = good.replacen("split", "split\tnotes", 1);
    assert!(Manifest::parse(&extra_col, PathBuf::new()).is_err());
    let renamed = good.replacen("label", "class", 1);
    assert!(Manifest::parse(&renamed, PathBuf::new()).is_err());
    let bad_split = good.replace("\ttrain", "\tval");
    assert!(Manifest::parse(&bad_split, PathBuf::new()).is_err());
    let bad_label = good.replace("pedestrian street", "beach");
    assert!(Manifest::parse(&bad_label, PathBuf::new()).is_err());
    let bad_video = good.replace("frames:", "video:");
    assert!(Manifest::parse(&bad_video, PathBuf::new()).is_err());
    let neg = good.replace("\t48000\t", "\t-1\t");
    assert!(Manifest::parse(&neg, PathBuf::new()).is_err());
    let short = format!("{good}x\ty\n");
    assert!(Manifest::parse(&short, PathBuf::new()).is_err());
    let numeric_label = good.replace("pedestrian street", "3");
    assert_eq!(Manifest::parse(&numeric_label, PathBuf::new()).unwrap().rows[0].label.index(), 3);
}

#[test]
fn duplicate_clip_ids_are_rejected() {
    assert!(Manifest::new(vec![row("a", 1), row("a", 2)], PathBuf::new()).is_err());
}

#[test]
fn ten_second_clip_splits_into_ten_children() {
    let mut src = row("rec", 10 * CLIP_SAMPLES);
    src.audio_offset = 100;
    let out = split_clips(&manifest(vec![src]));
    assert_eq!(out.len(), 10);
    for (k, r) in out.rows.iter().enumerate() {
        assert_eq!(r.clip_id, format!("rec#{k}"));
        assert_eq!(r.audio_offset, 100 + k * CLIP_SAMPLES);
        assert_eq!(r.num_samples, CLIP_SAMPLES);
        assert_eq!(r.frames, [30 * k as u32, 30 * k as u32 + 14]);
        assert_eq!(r.label.index(), 3);
        assert_eq!(r.split, Split::Train);
        assert_eq!(r.audio_path, "audio/rec.wav");
    }
    assert_eq!(out.rows[0].frames, [0, 14]);
}

#[test]
fn split_truncates_and_tolerates_short_sources() {
    let m = manifest(vec![
        row("half", 9 * CLIP_SAMPLES + CLIP_SAMPLES / 2),
        row("nearly", 10 * CLIP_SAMPLES - 480),
        row("short", 10 * CLIP_SAMPLES - 481),
        row("tiny", CLIP_SAMPLES / 2),
    ]);
    let out = split_clips(&m);
    let count = |p: &str| out.rows.iter().filter(|r| r.clip_id.starts_with(p)).count();
    assert_eq!(count("half#"), 9);
    assert_eq!(count("nearly#"), 10);
    assert_eq!(count("short#"), 9);
    assert_eq!(count("tiny"), 0);
}

#[test]
fn splitting_one_second_rows_is_a_no_op() {
    let m = manifest(vec![row("a", CLIP_SAMPLES), row("b", CLIP_SAMPLES - 300)]);
    assert_eq!(split_clips(&m), m);
    let once = split_clips(&manifest(vec![row("long", 3 * CLIP_SAMPLES)]));
    assert_eq!(split_clips(&once), once);
}

fn sample_store() -> EmbeddingStore {
    let mut s = EmbeddingStore::new(3).unwrap();
    s.insert("x", 0, vec![1.0, -2.5, f32::MIN_POSITIVE]).unwrap();
    s.insert("x", 14, vec![0.1, 0.2, 0.3]).unwrap();
    s.insert("ü#2", 44, vec![-0.0, 7.0, 1e30]).unwrap();
    s
}

#[test]
fn embedding_store_round_trips_bytes() {
    let s = sample_store();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("e.avem");
    s.save(&p).unwrap();
    let back = EmbeddingStore::load(&p).unwrap();
    assert_eq!(back, s);
    assert_eq!(std::fs::read(&p).unwrap(), back.to_bytes());
    assert_eq!(back.get("x", 14).unwrap(), [0.1, 0.2, 0.3]);
    assert_eq!(back.get("ü#2", 44).unwrap()[0].to_bits(), (-0.0f32).to_bits());
    assert!(back.get("x", 1).is_err());
}

#[test]
fn embedding_store_header_layout() {
    let bytes = sample_store().to_bytes();
    assert_eq!(&bytes[..4], b"AVEM");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), AVEM_VERSION);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
    assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
    assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 1);
    assert_eq!(bytes[20], b'x');
}

#[test]
fn empty_store_is_valid() {
    let s = EmbeddingStore::new(64).unwrap();
    let bytes = s.to_bytes();
    assert_eq!(bytes.len(), 16);
    let back = EmbeddingStore::from_bytes(&bytes, Path::new("mem")).unwrap();
    assert_eq!((back.dim(), back.len()), (64, 0));
}

#[test]
fn embedding_store_rejects_bad_input() {
    let mut s = sample_store();
    assert!(s.insert("x", 0, vec![0.0; 3]).is_err());
    assert!(s.insert("y", 0, vec![0.0; 4]).is_err());
    assert!(s.insert("y", 0, vec![f32::NAN, 0.0, 0.0]).is_err());

    let p = Path::new("mem");
    let bytes = sample_store().to_bytes();
    let mut magic = bytes.clone();
    magic[1] = b'X';
    assert!(EmbeddingStore::from_bytes(&magic, p).is_err());
    assert!(EmbeddingStore::from_bytes(&bytes[..bytes.len() - 1], p).is_err());

    // Second record rewritten to duplicate the first key.
    let mut dup = EmbeddingStore::new(1).unwrap();
    dup.insert("a", 0, vec![1.0]).unwrap();
    dup.insert("b", 0, vec![2.0]).unwrap();
    let mut raw = dup.to_bytes();
    let second_id = raw.iter().rposition(|&b| b == b'b').unwrap();
    raw[second_id] = b'a';
    let err = EmbeddingStore::from_bytes(&raw, p).unwrap_err().to_string();
    assert!(err.contains("record 1"), "{err}");
}

#[test]
fn synthetic_corpus_has_expected_layout() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic(3, 7, dir.path()).unwrap();
    assert_eq!(m.len(), 30);
    for c in 0..N_CLASSES {
        let rows: Vec<_> = m.rows.iter().filter(|r| r.label.index() == c).collect();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows.iter().filter(|r| r.split == Split::Test).count(), 1);
    }
    m.check_paths().unwrap();
    let loaded = Manifest::load(&dir.path().join("manifest.tsv")).unwrap();
    assert_eq!(loaded.rows, m.rows);
    let store = EmbeddingStore::load(&dir.path().join("embeddings.avem")).unwrap();
    assert_eq!((store.dim(), store.len()), (SYNTH_EMBED_DIM, 60));

    let samples = load_samples(&m, VideoLoad::Frames { size: 32 }, None).unwrap();
    assert_eq!(samples[0].features.shape(), (N_FRAMES, N_MELS, N_MAPS));
    match &samples[0].video {
        SampleVideo::Frames(f) => assert_eq!((f[0].height(), f[1].width()), (32, 32)),
        SampleVideo::Embedding(_) => panic!("expected frames"),
    }
    let emb = load_samples(&m, VideoLoad::Embeddings(&store), None).unwrap();
    match &emb[4].video {
        SampleVideo::Embedding(e) => assert_eq!(e.len(), SYNTH_EMBED_DIM),
        SampleVideo::Frames(_) => panic!("expected embedding"),
    }
}

fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synthetic_corpus_is_byte_identical_per_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    generate_synthetic(2, 11, a.path()).unwrap();
    generate_synthetic(2, 11, b.path()).unwrap();
    generate_synthetic(2, 12, c.path()).unwrap();
    assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));
    assert_ne!(tree_bytes(a.path()), tree_bytes(c.path()));
}

#[test]
fn synthetic_rejects_tiny_classes() {
    let dir = tempfile::tempdir().unwrap();
    assert!(generate_synthetic(1, 0, dir.path()).is_err());
}

#[test]
fn synthetic_embeddings_pass_nearest_mean_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic(10, 3, dir.path()).unwrap();
    assert_eq!(m.len(), 100);
    let store = EmbeddingStore::load(&dir.path().join("embeddings.avem")).unwrap();
    let emb = |r: &ManifestRow| avsc::models::file_embedding(&store, r.embedding_key(), r.frames).unwrap();

    let mut means = vec![vec![0.0f64; SYNTH_EMBED_DIM]; N_CLASSES];
    let mut counts = [0usize; N_CLASSES];
    for r in m.rows.iter().filter(|r| r.split == Split::Train) {
        for (acc, v) in means[r.label.index()].iter_mut().zip(emb(r)) {
            *acc += v as f64;
        }
        counts[r.label.index()] += 1;
    }
    for (mean, &n) in means.iter_mut().zip(&counts) {
        mean.iter_mut().for_each(|v| *v /= n as f64);
    }
    let test: Vec<_> = m.rows.iter().filter(|r| r.split == Split::Test).collect();
    let correct = test
        .iter()
        .filter(|r| {
            let e = emb(r);
            let dist = |c: usize| -> f64 {
                means[c].iter().zip(&e).map(|(a, &b)| (a - b as f64).powi(2)).sum()
            };
            let best = (0..N_CLASSES).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap();
            best == r.label.index()
        })
        .count();
    assert!(correct as f64 / test.len() as f64 >= 0.9, "{correct}/{}", test.len());
}

#[test]
fn synthetic_tones_and_hues_are_class_specific() {
    assert_eq!(synth_tones(0), [300.0, 800.0]);
    assert_eq!(synth_tones(9), [1200.0, 2150.0]);
    let hues: Vec<[f64; 3]> = (0..N_CLASSES).map(synth_hue_rgb).collect();
    for i in 0..N_CLASSES {
        for j in i + 1..N_CLASSES {
            let d: f64 = hues[i].iter().zip(&hues[j]).map(|(a, b)| (a - b).abs()).sum();
            assert!(d > 40.0, "{i} vs {j}");
        }
    }
}
