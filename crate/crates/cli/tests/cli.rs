use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use armature::io::read_obj;
use armature::rig::make_desk_rig;
use armature_cli::report::Report;

const BIN: &str = env!("CARGO_BIN_EXE_armature");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(args).current_dir(dir).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Report {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{args:?}: report does not match schema: {e}"))
}

fn read_mesh(path: &Path) -> Vec<[f64; 3]> {
    read_obj(BufReader::new(std::fs::File::open(path).unwrap())).unwrap().0
}

#[test]
fn make_rig_is_reproducible_and_validates() {
    let d = tempfile::tempdir().unwrap();
    let r = ok(d.path(), &["make-rig", "--seed", "0", "--out", "a.arm"]);
    let Report::MakeRig(s) = r else { panic!("{r:?}") };
    assert_eq!((s.j, s.n_k), (17, 20));
    ok(d.path(), &["make-rig", "--seed", "0", "--out", "b.arm"]);
    assert_eq!(
        std::fs::read(d.path().join("a.arm")).unwrap(),
        std::fs::read(d.path().join("b.arm")).unwrap()
    );
    let Report::Validate(v) = ok(d.path(), &["validate", "a.arm"]) else {
        panic!()
    };
    assert!(v.valid && v.kind == "rig");
}

#[test]
fn usage_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let out = run(d.path(), &["make-rig", "--joints", "1", "--out", "x.arm"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("precondition"));
    assert_eq!(run(d.path(), &["pose", "--bogus"]).status.code(), Some(2));
    ok(d.path(), &["make-rig", "--out", "r.arm"]);
    let out = run(d.path(), &["pose", "--model", "r.arm", "--set", "wingspan=1", "--out", "p.obj"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("wingspan") && err.contains("shoulder_width") && err.contains("hip_width"),
        "{err}"
    );
    let out = run(d.path(), &["pose", "--model", "r.arm", "--set", "shoulder_width", "--out", "p.obj"]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(d.path().join("bad.toml"), "[train]\nepochz = 3\n").unwrap();
    let out = run(
        d.path(),
        &[
            "train", "--rig", "r.arm", "--data", "none.ds", "--config", "bad.toml", "--out", "m.arm",
        ],
    );
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_1() {
    let d = tempfile::tempdir().unwrap();
    let out = run(d.path(), &["pose", "--model", "missing.arm", "--out", "p.obj"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.arm"));
    std::fs::write(d.path().join("junk.arm"), b"not a container").unwrap();
    let out = run(d.path(), &["validate", "junk.arm"]);
    assert_eq!(out.status.code(), Some(1));
    let Report::Validate(v) = serde_json::from_slice(&out.stdout).unwrap() else {
        panic!()
    };
    assert!(!v.valid && !v.errors.is_empty());
}

#[test]
fn zero_pose_writes_the_template() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["make-rig", "--out", "r.arm"]);
    ok(d.path(), &["pose", "--model", "r.arm", "--out", "p.obj"]);
    let rig = make_desk_rig(0, 17, 12).unwrap();
    let v = read_mesh(&d.path().join("p.obj"));
    assert_eq!(v.len(), rig.vertex_count());
    // the OBJ carries f32 text, so compare against the f32-rounded template
    for (a, b) in v.iter().zip(&rig.template.vertices) {
        for k in 0..3 {
            assert!((a[k] - (b[k] as f32) as f64).abs() < 1e-7);
        }
    }
}

#[test]
fn shoulder_width_edit_moves_only_the_shoulder_subtrees() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["make-rig", "--out", "r.arm"]);
    let Report::Pose(base) = ok(d.path(), &["pose", "--model", "r.arm", "--out", "a.obj"]) else {
        panic!()
    };
    let Report::Pose(wide) = ok(
        d.path(),
        &["pose", "--model", "r.arm", "--set", "shoulder_width=+0.05", "--out", "b.obj"],
    ) else {
        panic!()
    };
    for ((na, va), (nb, vb)) in base.attributes.iter().zip(&wide.attributes) {
        assert_eq!(na, nb);
        if na == "shoulder_width" {
            assert_eq!(*vb - *va, 0.05);
        } else {
            assert_eq!(va, vb, "{na}");
        }
    }
    let rig = make_desk_rig(0, 17, 12).unwrap();
    let mut sub = rig.tree.subtree(rig.tree.index_of("l_shoulder").unwrap());
    sub.extend(rig.tree.subtree(rig.tree.index_of("r_shoulder").unwrap()));
    for (j, (a, b)) in base.joints.iter().zip(&wide.joints).enumerate() {
        let moved = armature::mesh::dist(*a, *b);
        if sub.contains(&j) {
            // bone directions round-trip through the container as f32
            assert!((moved - 0.05).abs() < 1e-7, "joint {j}: {moved}");
        } else {
            assert_eq!(moved, 0.0, "joint {j}");
        }
    }
}

#[test]
fn sample_is_reproducible() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["make-rig", "--out", "r.arm"]);
    let a = ok(
        d.path(),
        &["sample", "--model", "r.arm", "--n", "4", "--seed", "7", "--out-dir", "a"],
    );
    let b = ok(
        d.path(),
        &["sample", "--model", "r.arm", "--n", "4", "--seed", "7", "--out-dir", "b"],
    );
    let (Report::Sample(a), Report::Sample(b)) = (a, b) else { panic!() };
    assert_eq!(a.samples.len(), 4);
    for (x, y) in a.samples.iter().zip(&b.samples) {
        assert_eq!(x.params, y.params);
        assert_eq!(
            std::fs::read(d.path().join(&x.obj)).unwrap(),
            std::fs::read(d.path().join(&y.obj)).unwrap()
        );
    }
    assert_ne!(a.samples[0].params, a.samples[1].params);
}

#[test]
fn bench_report_matches_schema() {
    let d = tempfile::tempdir().unwrap();
    let Report::Bench(b) = ok(d.path(), &["bench", "--frames", "100", "--repeats", "2"]) else {
        panic!()
    };
    assert_eq!((b.base.frames, b.base.repeats, b.base.repeat_ms.len()), (100, 2, 2));
    assert!(b.base.verts_per_sec > 0.0 && b.subdivided.is_none());
    let out = run(d.path(), &["bench", "--frames", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_train_fit_export_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["make-rig", "--out", "r.arm"]);
    ok(
        p,
        &[
            "synth",
            "--rig",
            "r.arm",
            "--subjects",
            "3",
            "--poses",
            "4",
            "--seed",
            "1",
            "--out",
            "train.ds",
        ],
    );
    std::fs::write(
        p.join("train.toml"),
        "hand_components = 3\n[train]\nepochs = 2\nautoencoder_epochs = 1\nsurface_components = 4\nskeletal_components = 3\n[train.corrective]\nhidden = [8]\n",
    )
    .unwrap();
    let Report::Train(t) = ok(
        p,
        &[
            "train",
            "--rig",
            "r.arm",
            "--data",
            "train.ds",
            "--config",
            "train.toml",
            "--out",
            "m.arm",
            "--log",
            "log.jsonl",
        ],
    ) else {
        panic!()
    };
    assert_eq!((t.registrations, t.epochs, t.hand_components), (12, 2, 3));
    assert_eq!(std::fs::read_to_string(p.join("log.jsonl")).unwrap().lines().count(), 2);
    let Report::Validate(v) = ok(p, &["validate", "m.arm"]) else {
        panic!()
    };
    assert!(v.valid && v.kind == "model");

    ok(
        p,
        &[
            "synth-obs",
            "--model",
            "m.arm",
            "--seed",
            "3",
            "--vertices",
            "--out",
            "obs.json",
            "--truth",
            "truth.json",
        ],
    );
    let Report::Fit(f) = ok(
        p,
        &[
            "fit", "--model", "m.arm", "--obs", "obs.json", "--out", "fit.json", "--obj", "fit.obj",
        ],
    ) else {
        panic!()
    };
    assert!(f.metrics.vertex_mm.unwrap() < 1.0, "{:?}", f.metrics);
    assert_eq!(read_mesh(&p.join("fit.obj")).len(), 1946);
    let full: armature::fitting::FitResult = serde_json::from_slice(&std::fs::read(p.join("fit.json")).unwrap()).unwrap();
    assert_eq!(full.stages.len(), f.stages.len());

    let Report::Export(e) = ok(p, &["export", "--model", "m.arm", "--out-dir", "exp"]) else {
        panic!()
    };
    assert_eq!(e.files.len(), 3);
    let skel: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("exp/skeleton.json")).unwrap()).unwrap();
    assert_eq!(skel["parents"].as_array().unwrap().len(), 17);
}

#[test]
fn fit_config_file_controls_the_schedule() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["make-rig", "--out", "r.arm"]);
    ok(p, &["synth-obs", "--model", "r.arm", "--seed", "2", "--out", "obs.json"]);
    std::fs::write(
        p.join("fit.toml"),
        "sigma_3d = 0.1\n[priors]\nbeta_k = 1e-3\n[[stages]]\nname = \"only\"\nfree = [\"root\", \"body\"]\nterms = [\"joints\"]\niterations = 20\n",
    )
    .unwrap();
    let Report::Fit(f) = ok(
        p,
        &[
            "fit", "--model", "r.arm", "--obs", "obs.json", "--config", "fit.toml", "--out", "fit.json",
        ],
    ) else {
        panic!()
    };
    assert_eq!(f.stages.len(), 1);
    assert_eq!(f.stages[0].name, "only");
    assert!(f.stages[0].iterations <= 20);
    std::fs::write(p.join("bad.toml"), "sigma_3e = 0.1\n").unwrap();
    let out = run(
        p,
        &[
            "fit", "--model", "r.arm", "--obs", "obs.json", "--config", "bad.toml", "--out", "fit.json",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn serve_answers_http() {
    let mut child = Command::new(BIN)
        .args(["serve", "--addr", "127.0.0.1:0"])
        .stderr(Stdio::piped())
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on http://")
        .unwrap_or_else(|| panic!("{line}"))
        .to_string();
    let mut s = std::net::TcpStream::connect(&addr).unwrap();
    s.write_all(b"GET /model/meta HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n")
        .unwrap();
    let mut resp = String::new();
    s.read_to_string(&mut resp).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.contains("\"N_k\":20"));
}

#[test]
fn shipped_fit_config_is_the_default_schedule() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/fit.toml");
    let cfg: armature::fitting::FitConfig = toml::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(cfg, armature::fitting::FitConfig::default());
}
