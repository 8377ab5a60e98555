use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use armature::autodiff::Camera;
use armature::fitting::{fit_with, synthesize_observation, FitConfig, FitParams, Observation, SynthOptions};
use armature::io::write_obj;
use armature::kinematics::PoseState;
use armature::model::{BodyModel, ModelParams};
use armature::prior::{fit_hand_pca, train_pose_vae, VaeConfig};
use armature::rig::{make_desk_rig, save_rig, subdivide, Container, Rig};
use armature::skinning::bench_skinning;
use armature::training::{evaluate, load_dataset, save_dataset, synth_dataset, train, OracleConfig, OracleModel, TrainConfig, TrainState};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::args::*;
use crate::report::*;
use crate::Failure;

type Out<T> = Result<T, Failure>;

fn read_text(path: &Path) -> Out<String> {
    fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("cannot read {}: {e}", path.display())))
}

fn read_toml<T: DeserializeOwned + Default>(path: Option<&Path>) -> Out<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => toml::from_str(&read_text(p)?).map_err(|e| Failure::Usage(format!("config {}: {e}", p.display()))),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Out<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Out<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Out<()> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn write_mesh(path: &Path, vertices: &[[f64; 3]], faces: &[[u32; 3]]) -> Out<()> {
    let mut buf = Vec::new();
    write_obj(BufWriter::new(&mut buf), vertices, faces).expect("writing to memory");
    write_bytes(path, &buf)
}

fn load_model(path: &Path) -> Out<BodyModel> {
    Ok(BodyModel::load(path)?)
}

fn desk_default() -> Out<BodyModel> {
    Ok(BodyModel::from_rig(make_desk_rig(
        0,
        armature::rig::DEFAULT_JOINTS,
        armature::rig::DEFAULT_RADIAL_SEGMENTS,
    )?))
}

pub fn make_rig(a: &MakeRigArgs) -> Out<Report> {
    let mut rig = make_desk_rig(a.seed, a.joints, a.segments)?;
    if a.subdivide > 0 {
        rig = subdivide(&rig, a.subdivide);
        rig.validate()?;
    }
    save_rig(&rig, &a.out)?;
    let s = rig_summary(&rig, &a.out);
    eprintln!("wrote {} (J={}, V={}, F={}, N_k={})", a.out.display(), s.j, s.v, s.f, s.n_k);
    Ok(Report::MakeRig(s))
}

fn rig_summary(rig: &Rig, out: &Path) -> RigSummary {
    RigSummary {
        rig_id: rig.id.clone(),
        j: rig.joint_count(),
        v: rig.vertex_count(),
        f: rig.template.faces.len(),
        n_k: rig.attribute_count(),
        out: out.to_path_buf(),
    }
}

/// Validation failures are reported, then turned into exit code 1.
pub fn validate(a: &ValidateArgs) -> Out<(Report, bool)> {
    let bytes = fs::read(&a.input).map_err(|e| Failure::Runtime(format!("cannot read {}: {e}", a.input.display())))?;
    let kind = match Container::from_bytes(&bytes) {
        Ok(c) if c.has_meta("model") => "model",
        Ok(_) => "rig",
        Err(_) => "unknown",
    };
    let errors = match BodyModel::from_bytes(&bytes) {
        Ok(_) => Vec::new(),
        Err(armature::Error::Validation(v)) => v.iter().map(|x| x.to_string()).collect(),
        Err(e) => vec![e.to_string()],
    };
    let valid = errors.is_empty();
    if valid {
        eprintln!("{}: valid {kind}", a.input.display());
    } else {
        for e in &errors {
            eprintln!("{}: {e}", a.input.display());
        }
    }
    let report = ValidateReport {
        input: a.input.clone(),
        valid,
        kind: kind.to_string(),
        errors,
    };
    Ok((Report::Validate(report), valid))
}

pub fn synth(a: &SynthArgs) -> Out<Report> {
    let rig = load_model(&a.rig)?.rig;
    let cfg: OracleConfig = read_toml(a.oracle_config.as_deref())?;
    let oracle = OracleModel::new(&rig, &cfg)?;
    let regs = synth_dataset(&oracle, a.subjects, a.poses, a.seed)?;
    save_dataset(&a.out, &rig, &regs)?;
    eprintln!("wrote {} registrations to {}", regs.len(), a.out.display());
    Ok(Report::Synth(SynthReport {
        registrations: regs.len(),
        subjects: a.subjects,
        poses: a.poses,
        seed: a.seed,
        oracle: cfg,
        out: a.out.clone(),
    }))
}

/// Camera three meters in front of the subject looking back along -z.
pub fn front_camera() -> Camera {
    Camera {
        fx: 1000.0,
        fy: 1000.0,
        cx: 320.0,
        cy: 240.0,
        rotation: [1., 0., 0., 0., -1., 0., 0., 0., -1.],
        translation: [0.0, 1.0, 3.0],
    }
}

#[derive(Debug, Serialize)]
struct Truth {
    params: FitParams,
    model_params: ModelParams,
}

pub fn synth_obs(a: &SynthObsArgs) -> Out<Report> {
    let model = load_model(&a.model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let truth = FitParams::sample(&model, &mut rng, a.scale);
    let opts = SynthOptions {
        joints3d: !a.no_joints,
        landmarks3d: a.landmarks,
        vertices: a.vertices,
        camera: a.camera.then(front_camera),
    };
    let obs = synthesize_observation(&model, &truth, &opts)?;
    write_json(&a.out, &obs)?;
    if let Some(t) = &a.truth {
        let model_params = truth.to_model_params(&model)?;
        write_json(
            t,
            &Truth {
                params: truth,
                model_params,
            },
        )?;
    }
    eprintln!("wrote observation to {}", a.out.display());
    Ok(Report::SynthObs(SynthObsReport {
        keypoints3d: obs.keypoints3d.len(),
        keypoints2d: obs.keypoints2d.len(),
        vertices: obs.target_vertices.is_some(),
        out: a.out.clone(),
    }))
}

/// Training configuration file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub train: TrainConfig,
    /// Train a pose VAE on the dataset poses when present.
    pub pose_prior: Option<VaeConfig>,
    /// Fit a hand PCA with this many components when present.
    pub hand_components: Option<usize>,
}

pub fn train_cmd(a: &TrainArgs) -> Out<Report> {
    let rig = load_model(&a.rig)?.rig;
    let regs = load_dataset(&a.data, &rig)?;
    let mut file: TrainFile = read_toml(a.config.as_deref())?;
    if let Some(s) = a.seed {
        file.train.seed = s;
    }
    let initial_gates = TrainState::new(&rig, &regs, &file.train)?.correctives.active_count();
    let mut records = Vec::new();
    let (state, _) = train(&rig, &regs, &file.train, &mut |e| {
        info!(
            "epoch {} loss {:.4e} data {:.4e} gates {} ({:.1}s)",
            e.epoch, e.loss, e.terms.data, e.active_gates, e.seconds
        );
        records.push(EpochRecord {
            epoch: e.epoch,
            loss: e.loss,
            terms: e.terms,
            active_gates: e.active_gates,
        });
    })?;
    let mut model = state.to_model();
    let poses: Vec<PoseState> = regs.iter().map(|r| r.pose.clone()).collect();
    if let Some(vc) = &file.pose_prior {
        let (vae, _) = train_pose_vae(&poses, &rig.body_joints(), vc)?;
        model.pose_prior = Some(vae);
    }
    if let Some(k) = file.hand_components {
        model.hand_pca = Some(fit_hand_pca(&poses, &rig.hand_joints, k)?);
    }
    // evaluate what is written to disk
    let model = model.quantized()?;
    model.save(&a.out)?;
    let (eval_set, evaluated_on) = match &a.held_out {
        Some(p) => (load_dataset(p, &rig)?, p.display().to_string()),
        None => (regs.clone(), "training set".to_string()),
    };
    let evaluation = evaluate(&model, &eval_set)?;
    if let Some(path) = &a.log {
        let mut text = String::new();
        for r in &records {
            text.push_str(&serde_json::to_string(r).expect("records serialize"));
            text.push('\n');
        }
        write_bytes(path, text.as_bytes())?;
    }
    eprintln!(
        "wrote {}: vertex {:.3} mm, joint {:.3} mm on {evaluated_on}; gates {initial_gates} -> {}",
        a.out.display(),
        evaluation.vertex_mm,
        evaluation.joint_mm,
        state.correctives.active_count()
    );
    Ok(Report::Train(TrainReport {
        registrations: regs.len(),
        epochs: records.len(),
        initial_active_gates: initial_gates,
        final_active_gates: state.correctives.active_count(),
        final_epoch: records.last().cloned(),
        evaluation,
        evaluated_on,
        pose_prior: model.pose_prior.is_some(),
        hand_components: model.hand_pca.as_ref().map_or(0, |h| h.n_comp()),
        out: a.out.clone(),
    }))
}

pub fn fit_cmd(a: &FitArgs) -> Out<Report> {
    let model = load_model(&a.model)?;
    let obs: Observation = read_json(&a.obs)?;
    let cfg: FitConfig = read_toml(a.config.as_deref())?;
    let init: Option<FitParams> = a.init.as_deref().map(read_json).transpose()?;
    let result = fit_with(&model, &obs, &cfg, init, &mut |st| match &st.skipped {
        Some(why) => info!("stage {}: skipped ({why})", st.name),
        None => info!(
            "stage {}: {} iterations, objective {:.6e}",
            st.name,
            st.iterations,
            st.objective.last().copied().unwrap_or(f64::NAN)
        ),
    })?;
    write_json(&a.out, &result)?;
    if let Some(obj) = &a.obj {
        let mesh = model.mesh(&result.model_params)?;
        write_mesh(obj, &mesh.vertices, &model.rig.template.faces)?;
    }
    for w in &result.warnings {
        log::warn!("{w}");
    }
    eprintln!("fit objective {:.6e}; metrics {:?}", result.objective, result.metrics);
    Ok(Report::Fit(FitReport {
        objective: result.objective,
        terms: result.terms,
        metrics: result.metrics.clone(),
        stages: result
            .stages
            .iter()
            .map(|s| StageSummary {
                name: s.name.clone(),
                skipped: s.skipped.clone(),
                iterations: s.iterations,
                converged: s.converged,
                objective: s.objective.last().copied(),
            })
            .collect(),
        warnings: result.warnings.clone(),
        out: a.out.clone(),
        obj: a.obj.clone(),
    }))
}

/// Parses `name=value` attribute overrides.
pub fn parse_sets(sets: &[String]) -> Out<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for s in sets {
        let (name, value) = s
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects NAME=VALUE, got `{s}`")))?;
        let v: f64 = value
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("--set {name}: `{value}` is not a number")))?;
        out.insert(name.trim().to_string(), v);
    }
    Ok(out)
}

pub fn pose(a: &PoseArgs) -> Out<Report> {
    let model = load_model(&a.model)?;
    let mut params: ModelParams = match &a.params {
        Some(p) => read_json(p)?,
        None => ModelParams::zero(),
    };
    params.attributes.extend(parse_sets(&a.set)?);
    if a.no_correctives {
        params.apply_correctives = false;
    }
    let out = model.mesh(&params)?;
    write_mesh(&a.out, &out.vertices, &model.rig.template.faces)?;
    eprintln!("wrote {}", a.out.display());
    let names = model.rig.schema.names();
    Ok(Report::Pose(PoseReport {
        v: out.vertices.len(),
        f: model.rig.template.faces.len(),
        correctives: params.apply_correctives && model.correctives.is_some(),
        attributes: names.iter().map(|n| n.to_string()).zip(out.pose.skeletal.iter().copied()).collect(),
        joints: out.joints,
        out: a.out.clone(),
    }))
}

pub fn bench(a: &BenchArgs) -> Out<Report> {
    let rig = match &a.rig {
        Some(p) => load_model(p)?.rig,
        None => desk_default()?.rig,
    };
    let base = bench_skinning(&rig, a.frames, a.repeats)?;
    eprintln!(
        "{} vertices: {:.3} ms/frame, {:.2} M vertices/s",
        base.v,
        base.ms_mean,
        base.verts_per_sec / 1e6
    );
    let (subdivided, per_vertex_ratio) = if a.scaling {
        let fine = bench_skinning(&subdivide(&rig, 1), a.frames, a.repeats)?;
        let ratio = base.verts_per_sec / fine.verts_per_sec;
        eprintln!(
            "{} vertices: {:.3} ms/frame; per-vertex cost ratio {ratio:.2}",
            fine.v, fine.ms_mean
        );
        (Some(fine), Some(ratio))
    } else {
        (None, None)
    };
    Ok(Report::Bench(BenchSummary {
        base,
        subdivided,
        per_vertex_ratio,
    }))
}

pub fn sample(a: &SampleArgs) -> Out<Report> {
    let model = load_model(&a.model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut samples = Vec::with_capacity(a.n);
    for i in 0..a.n {
        let p = FitParams::sample(&model, &mut rng, a.scale);
        let params = p.to_model_params(&model)?;
        let mesh = model.mesh(&params)?;
        let obj = a.out_dir.join(format!("sample_{i:03}.obj"));
        write_mesh(&obj, &mesh.vertices, &model.rig.template.faces)?;
        samples.push(SampleEntry { obj, params });
    }
    eprintln!("wrote {} samples to {}", a.n, a.out_dir.display());
    Ok(Report::Sample(SampleReport {
        seed: a.seed,
        scale: a.scale,
        samples,
    }))
}

#[derive(Debug, Serialize)]
struct SkeletonExport<'a> {
    joint_names: &'a [String],
    parents: Vec<Option<usize>>,
    rest_positions: Vec<[f64; 3]>,
    /// Per vertex: `(joint, weight)` pairs with non-zero weight.
    skin: Vec<Vec<(u32, f64)>>,
}

pub fn export(a: &ExportArgs) -> Out<Report> {
    let model = load_model(&a.model)?;
    let rest = model.mesh(&ModelParams::zero())?;
    let rig = &model.rig;
    let mesh = a.out_dir.join("template.obj");
    write_mesh(&mesh, &rig.template.vertices, &rig.template.faces)?;
    let skeleton = SkeletonExport {
        joint_names: rig.tree.names(),
        parents: rig.tree.parents().to_vec(),
        rest_positions: rest.joints,
        skin: rig
            .skin
            .joints
            .iter()
            .zip(&rig.skin.weights)
            .map(|(js, ws)| js.iter().zip(ws).filter(|(_, w)| **w > 0.0).map(|(j, w)| (*j, *w)).collect())
            .collect(),
    };
    let skel = a.out_dir.join("skeleton.json");
    write_json(&skel, &skeleton)?;
    let meta = a.out_dir.join("meta.json");
    write_json(&meta, &model.meta())?;
    eprintln!("exported to {}", a.out_dir.display());
    Ok(Report::Export(ExportReport {
        files: vec![mesh, skel, meta],
    }))
}

pub fn serve(a: &ServeArgs, threads: Option<usize>) -> Out<()> {
    let model = match &a.model {
        Some(p) => load_model(p)?,
        None => desk_default()?,
    };
    let cfg = armature_service::ServiceConfig {
        fit: read_toml(a.fit_config.as_deref())?,
        allow_origin: a.allow_origin.clone(),
    };
    let app = armature_service::router(model, cfg)?;
    let mut rt = tokio::runtime::Builder::new_multi_thread();
    if let Some(n) = threads {
        rt.worker_threads(n.max(1));
    }
    let rt = rt.enable_all().build().map_err(|e| Failure::Runtime(format!("runtime: {e}")))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .map_err(|e| Failure::Runtime(format!("cannot bind {}: {e}", a.addr)))?;
        let addr = listener.local_addr().map_err(|e| Failure::Runtime(e.to_string()))?;
        eprintln!("listening on http://{addr}");
        std::io::stderr().flush().ok();
        armature_service::serve(listener, app)
            .await
            .map_err(|e| Failure::Runtime(format!("server: {e}")))
    })
}
