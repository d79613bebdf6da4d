//! Command-line checks run against the built binary. Each returns a description
//! of the first violated expectation.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::Array2;
use rand::Rng;

use unifeat::backbone::ResNetSpec;
use unifeat::descriptor::ExtractionMode;
use unifeat::formats::{index_file_name, FeatureFile, GlobalDescFile};
use unifeat::matching::Homography;
use unifeat::model::{Model, ModelShape};
use unifeat::synth::{write_pair_fixture, write_sequence_fixture, Texture};

use super::{oracle_affinity, oracle_ap, oracle_mutual_nn, rng};

pub type Check = fn(&Path) -> Result<(), String>;

pub fn all() -> Vec<(&'static str, Check)> {
    vec![
        ("extract teacher dim", extract_teacher_dim),
        ("extract ss head dim", extract_student_dim),
        ("extract blank image", extract_blank_image),
        (
            "extract student without checkpoint",
            extract_needs_checkpoint,
        ),
        ("extract unreadable image", extract_unreadable_image),
        ("match identity pair", match_identity_pair),
        ("match dim mismatch", match_dim_mismatch),
        ("match random pair counts", match_random_counts),
        ("train smoke and resume", train_smoke_and_resume),
        ("train invalid manifest", train_invalid_manifest),
        ("config unknown key", config_unknown_key),
        ("hpatches identity sequence", hpatches_identity_sequence),
        ("hpatches grouped curves", hpatches_grouped_curves),
        ("hpatches missing homography", hpatches_missing_homography),
        ("retrieval self index", retrieval_self_index),
        ("retrieval empty relevance", retrieval_empty_relevance),
        ("retrieval random oracle", retrieval_random_oracle),
        ("retrieval dim drift", retrieval_dim_drift),
        ("usage errors", usage_errors),
    ]
}

fn run(bin: &Path, args: &[&str]) -> Output {
    let cache = std::env::temp_dir().join("unifeat-no-cache");
    Command::new(bin)
        .args(args)
        .env("UNIFEAT_CACHE_DIR", cache)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn expect_code(out: &Output, want: i32, what: &str) -> Result<(), String> {
    match out.status.code() {
        Some(c) if c == want => Ok(()),
        c => Err(format!(
            "{what}: exit {c:?}, expected {want}\nstdout: {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )),
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn tempdir() -> tempfile::TempDir {
    tempfile::tempdir().expect("temp dir")
}

fn textured(dir: &Path, name: &str, size: u32, seed: u64) -> PathBuf {
    let path = dir.join(name);
    Texture::random(seed, f64::from(size))
        .render(size, size, &Homography::IDENTITY)
        .unwrap()
        .save(&path)
        .unwrap();
    path
}

fn read_feat(path: &Path) -> Result<FeatureFile, String> {
    FeatureFile::read(path).map_err(|e| e.to_string())
}

fn extract_teacher_dim(bin: &Path) -> Result<(), String> {
    let dir = tempdir();
    let img = textured(dir.path(), "t.png", 96, 1);
    let out = dir.path().join("out");
    let o = run(
        bin,
        &["extract", "--mode", "teacher", "--out", s(&out), s(&img)],
    );
    expect_code(&o, 0, "extract")?;
    let f = read_feat(&out.join("t.png.feat"))?;
    ensure(f.dim() == 1536, || format!("dim {}", f.dim()))?;
    ensure(!f.is_empty(), || "no keypoints on a textured image".into())?;
    ensure(f.mode == ExtractionMode::Teacher, || "mode".into())?;
    let stdout = String::from_utf8_lossy(&o.stdout);
    ensure(
        stdout.contains(&format!("{} keypoints, dim 1536", f.len())),
        || format!("counts not echoed: {stdout}"),
    )?;
    let g = GlobalDescFile::read(&out.join("t.png.gdesc")).map_err(|e| e.to_string())?;
    let norm = g
        .vector
        .iter()
        .map(|v| f64::from(*v).powi(2))
        .sum::<f64>()
        .sqrt();
    ensure((norm - 1.0).abs() < 1e-5, || format!("global norm {norm}"))?;
    ensure(g.image_id == "t.png", || g.image_id.clone())
}

fn extract_student_dim(bin: &Path) -> Result<(), String> {
    let dir = tempdir();
    let shape = ModelShape {
        resnet: ResNetSpec {
            layers: [1, 1, 1, 1],
            base_width: 32,
        },
        fpn_width: 16,
        d2: 256,
        d3: 256,
    };
    let ckpt = dir.path().join("m.safetensors");
    Model::seeded(shape, 0.3, 3)
        .unwrap()
        .save(&ckpt)
        .map_err(|e| e.to_string())?;
    let img = textured(dir.path(), "t.png", 80, 2);
    let out = dir.path().join("out");
    let o = run(
        bin,
        &[
            "extract",
            "--mode",
            "ss",
            "--checkpoint",
            s(&ckpt),
            "--out",
            s(&out),
            s(&img),
        ],
    );
    expect_code(&o, 0, "extract ss")?;
    let f = read_feat(&out.join("t.png.feat"))?;
    ensure(f.dim() == 512, || format!("dim {}", f.dim()))?;
    ensure(f.mode == ExtractionMode::Ss, || "mode".into())
}

fn extract_blank_image(bin: &Path) -> Result<(), String> {
    let dir = tempdir();
    let img = dir.path().join("blank.png");
    image::RgbImage::from_pixel(72, 64, image::Rgb([120, 120, 120]))
        .save(&img)
        .unwrap();
    let out = dir.path().join("out");
    let o = run(
        bin,
        &["extract", "--mode", "teacher", "--out", s(&out), s(&img)],
    );
    expect_code(&o, 0, "extract blank")?;
    let f = read_feat(&out.join("blank.png.feat"))?;
    ensure(f.is_empty() && f.dim() == 1536, || {
        format!("N={} D={}", f.len(), f.dim())
    })?;
    ensure((f.image_width, f.image_height) == (72, 64), || {
        "image size".into()
    })
}

fn extract_needs_checkpoint(bin: &Path) -> Result<(), String> {
    let dir = tempdir();
    let img = textured(dir.path(), "t.png", 64, 1);
    for mode in ["ts", "ss"] {
        let o = run(
            bin,
            &["extract", "--mode", mode, "--out", s(dir.path()), s(&img)],
        );
        expect_code(&o, 2, mode)?;
        let err = String::from_utf8_lossy(&o.stderr);
        ensure(err.contains("--checkpoint"), || format!("message: {err}"))?;
    }
    Ok(())
}

fn extract_unreadable_image(bin: &Path) -> Result<(), String> {
    let dir = tempdir();
    let corrupt = dir.path().join("corrupt.png");
    fs::write(&corrupt, b"not an image").unwrap();
    let missing = dir.path().join("missing.png");
    for img in [&missing, &corrupt] {
        let o = run(
            bin,
            &[
                "extract",
                "--mode",
                "teacher",
                "--out",
                s(dir.path()),
                s(img),
            ],
        );
        expect_code(&o, 3, &img.display().to_string())?;
    }
    Ok(())
}

fn feature_file(descriptors: Array2<f32>, seed: u64) -> FeatureFile {
    let mut r = rng(seed);
    let n = descriptors.nrows();
    FeatureFile {
        image_width: 200,
        image_height: 100,
        stride: 4.0,
        mode: ExtractionMode::Teacher,
        groups: 6,
        keypoints: Array2::from_shape_fn((n, 4), |(_, j)| match j {
            0 => r.random_range(0.0..200.0),
            1 => r.random_range(0.0..100.0),
            2 => r.random_range(0.0..1.0),
            _ => 1.0,
        }),
        descriptors,
    }
}

fn random_unit_rows(n: usize, d: usize, seed: u64) -> Array2<f32> {
    let mut r = rng(seed);
    let mut m = Array2::from_shape_simple_fn((n, d), || r.random_range(-1.0f32..1.0));
    for mut row in m.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        row.mapv_inplace(|v| v / norm);
    }
    m
}

fn match_lines(path: &Path) -> Result<Vec<String>, String> {
    Ok(fs::read_to_string(path)
        .map_err(|e| e.to_string())?
        .lines()
        .map(String::from)
        .collect())
}

fn match_identity_pair(bin: &Path) -> Result<(), String> {
    let dir = tempdir();
    let a = dir.path().join("a.feat");
    feature_file(random_unit_rows(40, 16, 1), 2)
        .write(&a)
        .map_err(|e| e.to_string())?;
    let h = dir.path().join("H");
    fs::write(&h, Homography::IDENTITY.to_text()).unwrap();
    let out = dir.path().join("m.txt");
    let o = run(
        bin,
        &[
            "match",
            s(&a),
            s(&a),
            "--out",
            s(&out),
            "--homography",
            s(&h),
        ],
    );
    expect_code(&o, 0, "match")?;
    let lines = match_lines(&out)?;
    let mma: Vec<&String> = lines.iter().filter(|l| l.starts_with("# mma ")).collect();
    ensure(mma.len() == 10, || format!("{} mma lines", mma.len()))?;
    for l in mma {
        ensure(l.ends_with(" 1"), || format!("not 1.0: {l}"))?;
    }
    ensure(
        lines.iter().filter(|l| !l.starts_with('#')).count() == 40,
        || "identity pair should match every keypoint".into(),
    )
}

fn match_dim_mismatch(bin: &Path) -> Result<(), String> {
    let dir = tempdir();
    let a = dir.path().join("a.feat");
    let b = dir.path().join("b.feat");
    feature_file(random_unit_rows(5, 8, 1), 1)
        .write(&a)
        .unwrap();
    feature_file(random_unit_rows(5, 9, 2), 2)
        .write(&b)
        .unwrap();
    let o = run(
        bin,
        &["match", s(&a), s(&b), "--out", s(&dir.path().join("m"))],
    );
    expect_code(&o, 2, "dim mismatch")
}

fn match_random_counts(bin: &Path) -> Result<(), String> {
    let dir = tempdir();
    for seed in 0..3u64 {
        let da = random_unit_rows(30 + seed as usize, 12, 10 + seed);
        let db = random_unit_rows(25, 12, 20 + seed);
        let want = oracle_mutual_nn(&oracle_affinity(&da.mapv(f64::from), &db.mapv(f64::from)));
        let (a, b) = (dir.path().join("a.feat"), dir.path().join("b.feat"));
        let (fa, fb) = (feature_file(da, seed), feature_file(db, seed + 7));
        fa.write(&a).unwrap();
        fb.write(&b).unwrap();
        let out = dir.path().join("m.txt");
        expect_code(
            &run(bin, &["match", s(&a), s(&b), "--out", s(&out)]),
            0,
            "match",
        )?;
        let lines = match_lines(&out)?;
        ensure(lines.len() == want.len(), || {
            format!("{} matches, oracle {}", lines.len(), want.len())
        })?;
        for (line, (i, j)) in lines.iter().zip(&want) {
            let v: Vec<f64> = line.split(' ').map(|t| t.parse().unwrap()).collect();
            let same = v[0] == f64::from(fa.keypoints[[*i, 0]])
                && v[1] == f64::from(fa.keypoints[[*i, 1]])
                && v[2] == f64::from(fb.keypoints[[*j, 0]])
                && v[3] == f64::from(fb.keypoints[[*j, 1]]);
            ensure(same, || format!("line {line:?} is not pair ({i}, {j})"))?;
        }
    }
    Ok(())
}

const TOY_CONFIG: &str = "[train]\nepochs = 3\nepoch_size = 4\nbatch_tuples = 2\n\
                          resolution = 64\nd2 = 8\nd3 = 8\nkeep_checkpoints = 0\n\
                          [train.loss]\nnegatives = 2\n";

fn lr_records(path: &Path) -> Result<Vec<(usize, f64)>, String> {
    fs::read_to_string(path)
        .map_err(|e| e.to_string())?
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).map_err(|e| e.to_string())?;
            Ok((
                v["epoch"].as_u64().unwrap() as usize,
                v["lr"].as_f64().unwrap(),
            ))
        })
        .collect()
}

fn train_smoke_and_resume(bin: &Path) -> Result<(), String> {
    let dir = tempdir();
    let manifest = write_pair_fixture(&dir.path().join("pairs"), 3, 64, 4).unwrap();
    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, TOY_CONFIG).unwrap();
    let out = dir.path().join("run");
    let o = run(
        bin,
        &[
            "train",
            "--manifest",
            s(&manifest),
            "--config",
            s(&cfg),
            "--out",
            s(&out),
            "--max-steps",
            "2",
        ],
    );
    expect_code(&o, 0, "train")?;
    let first = out.join("epoch-001.safetensors");
    ensure(first.is_file(), || "epoch-1 checkpoint missing".into())?;
    let o = run(
        bin,
        &[
            "train",
            "--manifest",
            s(&manifest),
            "--config",
            s(&cfg),
            "--out",
            s(&out),
            "--resume",
            s(&first),
        ],
    );
    expect_code(&o, 0, "resume")?;
    let records = lr_records(&out.join("loss_log.jsonl"))?;
    ensure(records.len() == 6, || {
        format!("{} log records", records.len())
    })?;
    for (epoch, lr) in &records {
        let want = 1e-3 * (-0.1 * *epoch as f64).exp();
        ensure((lr - want).abs() <= 1e-15, || {
            format!("epoch {epoch}: lr {lr}, expected {want}")
        })?;
    }
    let epochs: Vec<usize> = records.iter().map(|r| r.0).collect();
    ensure(epochs == [0, 0, 1, 1, 2, 2], || {
        format!("epochs {epochs:?}")
    })?;
    ensure(out.join("epoch-003.safetensors").is_file(), || {
        "final checkpoint missing".into()
    })
}

fn train_invalid_manifest(bin: &Path) -> Result<(), String> {
    let dir = tempdir();
    let manifest = dir.path().join("m.jsonl");
    fs::write(
        &manifest,
        "{\"scene\":\"a\",\"anchor\":\"x.png\",\"positive\":\"y.png\"}\n{\"scene\":\"b\"}\n",
    )
    .unwrap();
    let o = run(
        bin,
        &["train", "--manifest", s(&manifest), "--out", s(dir.path())],
    );
    expect_code(&o, 2, "invalid manifest")?;
    let err = String::from_utf8_lossy(&o.stderr);
    ensure(err.contains("m.jsonl:2:"), || {
        format!("no line number: {err}")
    })
}

fn config_unknown_key(bin: &Path) -> Result<(), String> {
    let dir = tempdir();
    let cfg = dir.path().join("c.toml");
    let img = textured(dir.path(), "t.png", 64, 1);
    for text in [
        "[detector]\ngroupz = 3\n",
        "[detector]\nrel_threshold = 2.0\n",
    ] {
        fs::write(&cfg, text).unwrap();
        let o = run(
            bin,
            &[
                "extract",
                "--config",
                s(&cfg),
                "--mode",
                "teacher",
                "--out",
                s(dir.path()),
                s(&img),
            ],
        );
        expect_code(&o, 2, text)?;
    }
    Ok(())
}

fn table(stdout: &[u8]) -> Result<Vec<Vec<String>>, String> {
    let text = String::from_utf8_lossy(stdout);
    let rows: Vec<Vec<String>> = text
        .lines()
        .map(|l| l.split('\t').map(String::from).collect())
        .collect();
    ensure(
        rows.first().map(|r| r.join(","))
            == Some("threshold,overall,illumination,viewpoint".into()),
        || format!("bad header: {text}"),
    )?;
    ensure(rows.len() == 11, || format!("{} rows", rows.len()))?;
    Ok(rows)
}

fn hpatches_identity_sequence(bin: &Path) -> Result<(), String> {
    let dir = tempdir();
    let seq = dir.path().join("i_same");
    fs::create_dir_all(&seq).unwrap();
    textured(&seq, "1.png", 96, 5);
    textured(&seq, "2.png", 96, 5);
    fs::write(seq.join("H_1_2"), Homography::IDENTITY.to_text()).unwrap();
    let o = run(bin, &["eval-hpatches", s(dir.path()), "--mode", "teacher"]);
    expect_code(&o, 0, "eval-hpatches")?;
    let rows = table(&o.stdout)?;
    for r in &rows[1..] {
        ensure(r[1] == "1" && r[2] == "1", || format!("row {r:?}"))?;
        ensure(r[3] == "NaN", || {
            format!("empty group should be NaN: {r:?}")
        })?;
    }
    Ok(())
}

fn hpatches_grouped_curves(bin: &Path) -> Result<(), String> {
    let dir = tempdir();
    write_sequence_fixture(dir.path(), 1, 1, 96, 3).unwrap();
    let o = run(bin, &["eval-hpatches", s(dir.path()), "--mode", "teacher"]);
    expect_code(&o, 0, "eval-hpatches")?;
    let rows = table(&o.stdout)?;
    let mut prev = [0.0f64; 3];
    for r in &rows[1..] {
        for (k, cell) in r[1..].iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| format!("cell {cell:?}"))?;
            ensure((0.0..=1.0).contains(&v) && v >= prev[k], || {
                format!("curve not a monotone fraction: {r:?}")
            })?;
            prev[k] = v;
        }
        // the overall curve averages the two single-pair groups
        let v: Vec<f64> = r[1..].iter().map(|c| c.parse().unwrap()).collect();
        ensure((v[0] - (v[1] + v[2]) / 2.0).abs() < 1e-12, || {
            format!("overall is not the pair mean: {r:?}")
        })?;
    }
    let err = String::from_utf8_lossy(&o.stderr);
    ensure(
        err.contains("overall 2, illumination 1, viewpoint 1; skipped 0"),
        || format!("counts: {err}"),
    )
}

fn hpatches_missing_homography(bin: &Path) -> Result<(), String> {
    let dir = tempdir();
    write_sequence_fixture(dir.path(), 1, 2, 96, 3).unwrap();
    fs::remove_file(dir.path().join("v_synth0/H_1_3")).unwrap();
    fs::write(dir.path().join("i_synth0/H_1_2"), "1 0 0\n0 1\n").unwrap();
    let o = run(bin, &["eval-hpatches", s(dir.path()), "--mode", "teacher"]);
    expect_code(&o, 0, "eval-hpatches")?;
    let err = String::from_utf8_lossy(&o.stderr);
    ensure(err.contains("skipped 2") && err.contains("WARN"), || {
        format!("expected two skipped pairs with warnings: {err}")
    })?;
    ensure(err.contains("overall 2,"), || format!("counts: {err}"))
}

fn write_index(dir: &Path, ids: &[String], vectors: &Array2<f32>) {
    fs::create_dir_all(dir).unwrap();
    for (id, row) in ids.iter().zip(vectors.rows()) {
        GlobalDescFile {
            image_id: id.clone(),
            vector: row.to_owned(),
        }
        .write(&dir.join(index_file_name(id)))
        .unwrap();
    }
}

fn retrieval(
    bin: &Path,
    dir: &Path,
    queries: &[String],
    relevance: &[(String, Vec<String>)],
) -> Output {
    let q = dir.join("queries.txt");
    fs::write(&q, queries.join("\n")).unwrap();
    let r = dir.join("relevance.txt");
    let text: Vec<String> = relevance
        .iter()
        .map(|(q, rel)| format!("{q} {}", rel.join(" ")))
        .collect();
    fs::write(&r, text.join("\n")).unwrap();
    run(
        bin,
        &[
            "eval-retrieval",
            "--index",
            s(&dir.join("index")),
            "--queries",
            s(&q),
            "--relevance",
            s(&r),
        ],
    )
}

fn report(stdout: &[u8]) -> Vec<(String, String)> {
    String::from_utf8_lossy(stdout)
        .lines()
        .skip(1)
        .filter_map(|l| l.split_once('\t'))
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect()
}

fn ids(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i:02}")).collect()
}

fn retrieval_self_index(bin: &Path) -> Result<(), String> {
    let dir = tempdir();
    let q = ids("img", 6);
    write_index(&dir.path().join("index"), &q, &random_unit_rows(6, 10, 3));
    let rel: Vec<(String, Vec<String>)> = q.iter().map(|i| (i.clone(), vec![i.clone()])).collect();
    let o = retrieval(bin, dir.path(), &q, &rel);
    expect_code(&o, 0, "eval-retrieval")?;
    let rep = report(&o.stdout);
    ensure(
        rep.last() == Some(&("mAP".to_string(), "1".to_string())),
        || format!("{rep:?}"),
    )
}

fn retrieval_empty_relevance(bin: &Path) -> Result<(), String> {
    let dir = tempdir();
    let q = ids("img", 4);
    write_index(&dir.path().join("index"), &q, &random_unit_rows(4, 6, 5));
    let rel = vec![
        (q[0].clone(), vec![q[0].clone()]),
        (q[1].clone(), vec![q[1].clone()]),
    ];
    let o = retrieval(bin, dir.path(), &q[..3], &rel);
    expect_code(&o, 0, "eval-retrieval")?;
    let rep = report(&o.stdout);
    ensure(rep[2] == (q[2].clone(), "excluded".to_string()), || {
        format!("{rep:?}")
    })?;
    ensure(rep[3].1 == "1", || format!("{rep:?}"))?;
    let err = String::from_utf8_lossy(&o.stderr);
    ensure(err.contains("1 queries excluded"), || {
        format!("warning: {err}")
    })
}

fn retrieval_random_oracle(bin: &Path) -> Result<(), String> {
    let dir = tempdir();
    let mut r = rng(17);
    let items = ids("item", 20);
    let vectors = random_unit_rows(20, 8, 9);
    write_index(&dir.path().join("index"), &items, &vectors);
    let queries: Vec<String> = items[..5].to_vec();
    let rel: Vec<(String, Vec<String>)> = queries
        .iter()
        .map(|q| {
            let k = r.random_range(1..6);
            let set: Vec<String> = (0..k)
                .map(|_| items[r.random_range(0..20)].clone())
                .collect::<HashSet<_>>()
                .into_iter()
                .collect();
            (q.clone(), set)
        })
        .collect();
    let o = retrieval(bin, dir.path(), &queries, &rel);
    expect_code(&o, 0, "eval-retrieval")?;
    let rep = report(&o.stdout);
    let mut total = 0.0;
    for (qi, (q, relevant)) in rel.iter().enumerate() {
        let query = vectors.row(qi);
        let mut scored: Vec<(f64, &String)> = items
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let sim: f64 = (0..8)
                    .map(|k| f64::from(vectors[[i, k]]) * f64::from(query[k]))
                    .sum();
                (sim, id)
            })
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
        let ranking: Vec<String> = scored.into_iter().map(|(_, id)| id.clone()).collect();
        let want = oracle_ap(&ranking, &relevant.iter().cloned().collect());
        total += want;
        let got: f64 = rep[qi].1.parse().map_err(|_| format!("{:?}", rep[qi]))?;
        ensure(rep[qi].0 == *q && (got - want).abs() <= 1e-12, || {
            format!("{q}: AP {got}, oracle {want}")
        })?;
    }
    let map: f64 = rep[5].1.parse().unwrap();
    ensure((map - total / 5.0).abs() <= 1e-12, || {
        format!("mAP {map}, oracle {}", total / 5.0)
    })
}

fn retrieval_dim_drift(bin: &Path) -> Result<(), String> {
    let dir = tempdir();
    let index = dir.path().join("index");
    write_index(&index, &ids("a", 2), &random_unit_rows(2, 4, 1));
    write_index(&index, &ids("b", 1), &random_unit_rows(1, 5, 2));
    let q = ids("a", 1);
    let o = retrieval(bin, dir.path(), &q, &[(q[0].clone(), q.clone())]);
    expect_code(&o, 2, "dim drift")
}

fn usage_errors(bin: &Path) -> Result<(), String> {
    for args in [
        vec!["frobnicate"],
        vec!["extract", "--out", "x"],
        vec!["extract", "--mode", "xx", "--out", "x", "a.png"],
        vec!["match", "only-one.feat"],
    ] {
        expect_code(&run(bin, &args), 2, &args.join(" "))?;
    }
    expect_code(&run(bin, &["--help"]), 0, "--help")
}
