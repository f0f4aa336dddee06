//! Regenerates the bundled fixture under `fixtures/golden/`.
//!
//! Twenty 640x480 frames from five patients, half clean and half degraded.
//! Detector confidences on degraded frames are often below the clean-frame
//! threshold, so only the lowered threshold recovers those polyps. No two
//! proposals hit the same polyp and every false proposal is well clear of
//! all polyps. The verifier recordings contain one missed polyp, one false
//! accept, one malformed reply and one crop that was never recorded.
//!
//! Run with `cargo run -p cascadet --example make_fixtures`, then refresh
//! the expected outputs with `--example make_fixtures -- --expected`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cascadet::commands::cmd_run;
use cascadet::config::{sha256_hex, RunConfig};
use cascadet_core::cascade::{crop_requests, Condition, FrameRecord, Stage2Config};
use cascadet_core::geometry::{iou, BoundingBox, Candidate};
use cascadet_core::protocol::{render_verdict_response, Confidence, Decision, VerdictResponse};
use cascadet_core::quality::QualityFactors;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

const W: f64 = 640.0;
const H: f64 = 480.0;
const TAGS: [&[&str]; 10] = [
    &["dim"],
    &["mucus"],
    &["stool"],
    &["bubbles"],
    &["motion_blur"],
    &["dim", "mucus"],
    &["bubbles", "stool"],
    &["dim", "motion_blur"],
    &["mucus", "bubbles"],
    &["stool", "motion_blur"],
];

fn round1(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

fn rbox(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
    BoundingBox::new(round1(x1), round1(y1), round1(x2), round1(y2)).unwrap()
}

fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    let w = rng.random_range(50.0..120.0);
    let h = rng.random_range(50.0..120.0);
    let x = rng.random_range(10.0..W - w - 10.0);
    let y = rng.random_range(10.0..H - h - 10.0);
    rbox(x, y, x + w, y + h)
}

/// Proposal around `gt` with IoU in roughly [0.45, 0.9].
fn jitter(rng: &mut ChaCha8Rng, gt: &BoundingBox) -> BoundingBox {
    loop {
        let s = gt.width().min(gt.height()) * 0.15;
        let b = rbox(
            (gt.x1() + rng.random_range(-s..s)).max(0.0),
            (gt.y1() + rng.random_range(-s..s)).max(0.0),
            (gt.x2() + rng.random_range(-s..s)).min(W),
            (gt.y2() + rng.random_range(-s..s)).min(H),
        );
        if iou(&b, gt) >= 0.45 {
            return b;
        }
    }
}

fn quality(rng: &mut ChaCha8Rng, degraded: bool) -> QualityFactors {
    let r = if degraded { 0.15..0.45 } else { 0.65..0.95 };
    let mut f = || (rng.random_range(r.clone()) * 100.0_f64).round() / 100.0;
    QualityFactors::new(f(), f(), f()).unwrap()
}

fn verdict(decision: Decision, hundredths: u8) -> String {
    render_verdict_response(&VerdictResponse {
        think: format!("The region {} a polyp.", if decision.is_yes() { "shows" } else { "does not show" }),
        decision,
        confidence: Confidence::from_hundredths(hundredths).unwrap(),
    })
    .unwrap()
}

struct Proposal {
    cand: Candidate,
    positive: bool,
}

fn main() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/golden");
    if std::env::args().any(|a| a == "--expected") {
        write_expected(&root);
        return;
    }
    std::fs::create_dir_all(&root).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let stage2 = Stage2Config::default();

    let mut frames = Vec::new();
    let mut proposals: Vec<Vec<Proposal>> = Vec::new();
    for i in 0..20usize {
        let degraded = i >= 10;
        let n_gt = match i {
            9 => 0,
            3 | 7 | 13 | 17 => 2,
            _ => 1,
        };
        let mut gts: Vec<BoundingBox> = Vec::new();
        while gts.len() < n_gt {
            let b = random_box(&mut rng);
            if gts.iter().all(|g| g.intersection_area(&b) == 0.0) {
                gts.push(b);
            }
        }
        let mut props = Vec::new();
        for (k, g) in gts.iter().enumerate() {
            let low = degraded && (i + k) % 2 == 0;
            let conf = if low {
                rng.random_range(0.22..0.45)
            } else if degraded {
                rng.random_range(0.5..0.75)
            } else {
                rng.random_range(0.55..0.95)
            };
            let conf = (conf * 100.0_f64).round() / 100.0;
            props.push(Proposal {
                cand: Candidate::new(jitter(&mut rng, g), conf).unwrap(),
                positive: true,
            });
        }
        let n_fp = [1, 0, 2][i % 3];
        while props.iter().filter(|p| !p.positive).count() < n_fp {
            let b = random_box(&mut rng);
            if gts.iter().all(|g| iou(g, &b) < 0.1) && props.iter().all(|p| iou(p.cand.bbox(), &b) < 0.1) {
                let conf = (rng.random_range(0.25..0.65) * 100.0_f64).round() / 100.0;
                props.push(Proposal {
                    cand: Candidate::new(b, conf).unwrap(),
                    positive: false,
                });
            }
        }
        // A proposal below every threshold.
        if i % 4 == 1 {
            let b = random_box(&mut rng);
            if gts.iter().all(|g| iou(g, &b) < 0.1) {
                props.push(Proposal {
                    cand: Candidate::new(b, 0.1).unwrap(),
                    positive: false,
                });
            }
        }
        let tags: BTreeSet<String> = if degraded {
            TAGS[i - 10].iter().map(|t| t.to_string()).collect()
        } else {
            BTreeSet::new()
        };
        frames.push(FrameRecord {
            frame_id: format!("f{:02}", i + 1),
            patient_id: Some(format!("p{}", i % 5 + 1)),
            image_width: W,
            image_height: H,
            condition: if degraded { Condition::Degraded } else { Condition::Clean },
            degradation_tags: tags,
            quality: None,
            ground_truths: gts,
            image_ref: Some(format!("images/f{:02}.png", i + 1)),
        });
        proposals.push(props);
    }

    let mut annotations = String::new();
    for f in &frames {
        annotations.push_str(&serde_json::to_string(f).unwrap());
        annotations.push('\n');
    }
    std::fs::write(root.join("frames.jsonl"), &annotations).unwrap();
    let sha = sha256_hex(annotations.as_bytes());
    let manifest = json!({
        "version": 1,
        "name": "golden-20",
        "annotations": "frames.jsonl",
        "sha256": sha,
    });
    std::fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&manifest).unwrap() + "\n").unwrap();
    let degraded_ids: Vec<&str> = frames
        .iter()
        .filter(|f| f.condition == Condition::Degraded)
        .map(|f| f.frame_id.as_str())
        .collect();
    let degraded = json!({
        "version": 1,
        "name": "golden-degraded",
        "annotations": "frames.jsonl",
        "sha256": sha,
        "frames": degraded_ids,
    });
    std::fs::write(root.join("degraded.json"), serde_json::to_string_pretty(&degraded).unwrap() + "\n").unwrap();

    let mut det = String::new();
    for (f, props) in frames.iter().zip(&proposals) {
        let boxes: Vec<&Candidate> = props.iter().map(|p| &p.cand).collect();
        let _ = writeln!(det, "{}", json!({ "frame_id": f.frame_id, "boxes": boxes }));
    }
    std::fs::write(root.join("detector.jsonl"), det).unwrap();

    let mut ver = String::new();
    let mut seen_positive = 0;
    let mut false_accept_done = false;
    for (fi, (f, props)) in frames.iter().zip(&proposals).enumerate() {
        let q = quality(&mut rng, f.condition == Condition::Degraded);
        let _ = writeln!(
            ver,
            "{}",
            json!({ "frame_id": f.frame_id, "adverse": f.condition == Condition::Degraded, "quality": q })
        );
        for (pi, p) in props.iter().enumerate() {
            if p.cand.confidence() < 0.2 {
                continue;
            }
            if p.positive {
                seen_positive += 1;
            }
            // Frame 6's first proposal was never recorded.
            if fi == 5 && pi == 0 {
                continue;
            }
            let base = if p.positive {
                if seen_positive == 4 {
                    verdict(Decision::No, 62)
                } else {
                    verdict(Decision::Yes, rng.random_range(75..96))
                }
            } else if !false_accept_done && p.cand.confidence() >= 0.5 {
                false_accept_done = true;
                verdict(Decision::Yes, 85)
            } else {
                verdict(Decision::No, rng.random_range(70..95))
            };
            for (ri, r) in crop_requests(&p.cand, f, &stage2).unwrap().iter().enumerate() {
                let mut raw = base.clone();
                if ri == 0 && p.positive && seen_positive == 9 {
                    raw = raw.replace("</answer>", "");
                }
                let _ = writeln!(
                    ver,
                    "{}",
                    json!({
                        "frame_id": f.frame_id,
                        "crop": [r.crop.x1(), r.crop.y1(), r.crop.x2(), r.crop.y2()],
                        "scale": r.scale,
                        "raw_response": raw,
                    })
                );
            }
        }
    }
    std::fs::write(root.join("verifier.jsonl"), ver).unwrap();

    let run = "\
# Run configuration for the bundled fixture. Paths are relative to this file.
dataset = \"manifest.json\"

[backend]
kind = \"replay\"
detector_fixture = \"detector.jsonl\"
verifier_fixture = \"verifier.jsonl\"
";
    std::fs::write(root.join("run.toml"), run).unwrap();
    println!("wrote fixtures to {}", root.display());
}

/// Runs the fixture with one worker and stores the timing-free outputs.
fn write_expected(root: &Path) {
    let mut cfg = RunConfig::load(&root.join("run.toml")).unwrap();
    let tmp = std::env::temp_dir().join("cascadet-expected");
    cfg.out = Some(tmp.clone());
    cmd_run(&cfg).unwrap();
    let expected = root.join("expected");
    std::fs::create_dir_all(&expected).unwrap();
    for name in ["report.json", "report.txt", "metrics.csv"] {
        std::fs::copy(tmp.join(name), expected.join(name)).unwrap();
    }
    println!("wrote expected outputs to {}", expected.display());
}
