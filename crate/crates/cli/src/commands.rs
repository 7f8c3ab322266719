use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use serde_json::json;
use voxaug::composer::{
    generate_batch, occlusion_filter, pillar_stats, render_scene, scene_view, AssetEntry, BaseSampling, CellState,
    ComposeInputs, SceneGraph, ValidRegionMap,
};
use voxaug::decomposition::{background_rays, build_tracks, manifest_bounds, object_rays, select_intact, SceneManifest};
use voxaug::field::ObjectAsset;
use voxaug::image::{psnr, DepthMap, RgbImage};
use voxaug::synth::scenes::SKY;
use voxaug::synth::{
    bake, car_dataset, generate_dataset, outside_density, CarShoot, CarViews, DatasetSpec, GridConfig, MaskNoise,
    NoiseMode, StreetScene, SynthFrame, WallScene,
};
use voxaug::trainer::{train_background, train_object, write_loss_csv, BackgroundGrid, LossRecord};
use voxaug::{Asset, Box3D, CameraModel, Pose, Vec3, VoxelField};

use crate::config::PipelineConfig;
use crate::exit::{Failure, MANIFEST, NOT_INTACT, NO_VALID_REGION};
use crate::store::AssetStore;
use crate::{ComposeArgs, Preset, RenderArgs, Side, SynthArgs, TrainBackgroundArgs, TrainObjectArgs, ValidRegionArgs};

type Outcome = Result<serde_json::Value, Failure>;

fn create_dir(p: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(p).map_err(|e| Failure::general(format!("{}: {e}", p.display())))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Failure::general(format!("{}: {e}", path.display())))
}

fn manifest_path(arg: Option<&PathBuf>, config: &PipelineConfig) -> Result<PathBuf, Failure> {
    let p = arg
        .or(config.paths.manifest.as_ref())
        .ok_or_else(|| Failure::general("no manifest given (flag --manifest or paths.manifest)"))?;
    Ok(if p.is_dir() { p.join("manifest.json") } else { p.clone() })
}

fn load_manifest(path: &Path) -> Result<SceneManifest, Failure> {
    let m = SceneManifest::load(path).map_err(|e| Failure::new(MANIFEST, e.to_string()))?;
    if m.frames.is_empty() {
        return Err(Failure::new(MANIFEST, format!("{}: manifest has no frames", path.display())));
    }
    Ok(m)
}

fn wall_spec(views: usize, size: u32) -> Result<DatasetSpec, Failure> {
    let wall = WallScene::new()?;
    let frames = (0..views)
        .map(|i| {
            let a = TAU * i as f64 / views as f64;
            let eye = Vec3::new(0.0, 0.0, 1.6);
            let pose = Pose::look_at(eye, Vec3::new(10.0 * a.cos(), 10.0 * a.sin(), 1.0), Vec3::z())?;
            Ok(SynthFrame {
                camera: CameraModel::with_fov(size, size, 90f64.to_radians(), pose)?,
                objects: vec![],
                timestamp: 0.1 * i as f64,
            })
        })
        .collect::<voxaug::Result<_>>()?;
    Ok(DatasetSpec {
        name: "wall".into(),
        scene: wall.scene,
        objects: vec![],
        frames,
        background: SKY,
        step: 0.02,
        noise: MaskNoise::default(),
        label_tracks: true,
    })
}

fn preset_spec(args: &SynthArgs, preset: Preset, seed: u64) -> Result<DatasetSpec, Failure> {
    let noise = MaskNoise {
        amplitude: args.noise_amplitude,
        mode: NoiseMode::Dilate,
        rate: args.noise_rate,
        seed,
    };
    let mut spec = match preset {
        Preset::Street => {
            let street = StreetScene::new()?;
            street.dataset(street.cameras(args.views.unwrap_or(40), args.phase, args.size.unwrap_or(128))?)
        }
        Preset::Car => car_dataset(&CarShoot {
            views: args.views.unwrap_or(24),
            size: args.size.unwrap_or(96),
            side: match args.side {
                Side::All => CarViews::All,
                Side::Pos => CarViews::PositiveY,
                Side::Neg => CarViews::NegativeY,
            },
            noise,
            phase: args.phase,
            ..CarShoot::default()
        })?,
        Preset::Wall => wall_spec(args.views.unwrap_or(4), args.size.unwrap_or(64))?,
    };
    spec.noise = noise;
    Ok(spec)
}

pub fn synth(args: &SynthArgs, config: &PipelineConfig) -> Outcome {
    let seed = config.seed.unwrap_or(0);
    let spec = match (&args.spec, args.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::general(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<DatasetSpec>(&text)?
        }
        (None, Some(p)) => preset_spec(args, p, seed)?,
        (None, None) => return Err(Failure::general("synth needs --preset or --spec")),
    };
    let out = config.output_dir();
    create_dir(&out)?;
    let data = generate_dataset(&spec)?;
    let manifest = data.manifest.save(&out)?;
    write_json(&out.join("spec.json"), &spec)?;
    let self_check = data
        .manifest
        .frames
        .iter()
        .zip(&data.renders)
        .map(|(f, r)| psnr(&f.image.to_colors(), &r.color))
        .fold(f64::INFINITY, f64::min);
    let mut summary = json!({
        "command": "synth",
        "name": spec.name,
        "frames": spec.frames.len(),
        "manifest": manifest,
        "quantization_psnr": self_check,
    });
    if let Some(voxel) = args.bake {
        let (field, report) = bake(
            &spec.scene,
            &GridConfig {
                bounds: spec.scene.bounds,
                voxel_size: voxel,
            },
        )?;
        let store = AssetStore::open(config.store_dir())?;
        let (id, _) = store.put(&Asset::Background(field))?;
        summary["baked"] = json!({ "asset": id, "clamped": report.clamped });
    }
    Ok(summary)
}

fn final_loss(trace: &[LossRecord]) -> serde_json::Value {
    trace.last().map_or(serde_json::Value::Null, |r| json!(r.loss))
}

pub fn train_background_cmd(args: &TrainBackgroundArgs, config: &PipelineConfig) -> Outcome {
    let path = manifest_path(args.manifest.as_ref(), config)?;
    let manifest = load_manifest(&path)?;
    let mut train = config.train;
    if let Some(n) = args.iterations {
        train.iterations = n;
    }
    if let Some(b) = args.batch_size {
        train.batch_size = b;
    }
    if let Some(w) = args.depth_weight {
        train.weights.depth = w;
    }
    train.validate()?;
    let settings = config.background;
    let bounds = match settings.bounds {
        Some(b) => b,
        None => manifest_bounds(&manifest, settings.margin)?,
    };
    let extent = bounds.size().max();
    let voxel = args
        .voxel_size
        .unwrap_or(settings.voxel_size)
        .max(extent / (settings.max_resolution.max(2) - 1) as f64);
    let grid = BackgroundGrid {
        bounds,
        voxel_size: voxel,
        color_mode: settings.color_mode,
    };
    let rays = background_rays(&manifest, &config.decomposition)?.batch.len();
    let out = train_background(&manifest, &grid, &config.decomposition, &train)?;
    let dir = config.output_dir();
    create_dir(&dir)?;
    write_loss_csv(&out.trace, dir.join("background_loss.csv"))?;
    let resolution = out.field.resolution();
    let store = AssetStore::open(config.store_dir())?;
    let (id, cached) = store.put(&Asset::Background(out.field))?;
    Ok(json!({
        "command": "train-background",
        "asset": id,
        "path": store.path(&id),
        "cached": cached,
        "iterations": train.iterations,
        "rays": rays,
        "voxel_size": voxel,
        "resolution": resolution,
        "final_loss": final_loss(&out.trace),
        "train_psnr": out.train_psnr,
    }))
}

pub fn train_object_cmd(args: &TrainObjectArgs, config: &PipelineConfig) -> Outcome {
    let path = manifest_path(args.manifest.as_ref(), config)?;
    let manifest = load_manifest(&path)?;
    let mut train = config.train;
    if let Some(n) = args.iterations {
        train.iterations = n;
    }
    if let Some(b) = args.batch_size {
        train.batch_size = b;
    }
    if let Some(w) = args.gc_weight {
        train.weights.gc = w;
    }
    if let Some(w) = args.depth_weight {
        train.weights.depth = w;
    }
    train.symmetric |= args.symmetric;
    train.validate()?;
    let mut grid = config.object;
    if let Some(v) = args.voxel_size {
        grid.voxel_size = v;
    }
    let tracks = build_tracks(&manifest, &config.decomposition);
    let track = tracks
        .iter()
        .find(|t| t.source_id == Some(args.track))
        .or_else(|| tracks.iter().find(|t| t.source_id.is_none() && t.id as u64 == args.track))
        .ok_or_else(|| Failure::general(format!("no track {} in {}", args.track, path.display())))?;
    if !select_intact(track, &manifest, &config.decomposition) {
        return Err(Failure::new(
            NOT_INTACT,
            format!(
                "track {} is not intact: every mask must stay off the image border, overlap no other object and fill its projected box",
                args.track
            ),
        ));
    }
    let rays = object_rays(track, &manifest, &config.decomposition).len();
    let (asset, trace, train_psnr) = train_object(&manifest, track, &grid, &config.decomposition, &train)?;
    let outside = match &args.truth {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::general(format!("{}: {e}", p.display())))?;
            let spec: DatasetSpec = serde_json::from_str(&text)?;
            let id = track.source_id.unwrap_or(args.track);
            Some(outside_density(&asset.field, spec.object(id)?))
        }
        None => None,
    };
    let dir = config.output_dir();
    create_dir(&dir)?;
    write_loss_csv(&trace, dir.join(format!("object_{}_loss.csv", args.track)))?;
    let size = asset.size();
    let symmetric = asset.symmetric;
    let store = AssetStore::open(config.store_dir())?;
    let (id, cached) = store.put(&Asset::Object(asset))?;
    let mut summary = json!({
        "command": "train-object",
        "asset": id,
        "path": store.path(&id),
        "cached": cached,
        "track": args.track,
        "size": [size.x, size.y, size.z],
        "symmetric": symmetric,
        "iterations": train.iterations,
        "rays": rays,
        "weights": train.weights,
        "final_loss": final_loss(&trace),
        "train_psnr": train_psnr,
    });
    if let Some(o) = outside {
        summary["outside_density"] = json!(o);
    }
    Ok(summary)
}

fn background_field(store: &AssetStore, reference: &str) -> Result<(String, VoxelField<f32>), Failure> {
    match store.resolve(reference)? {
        (id, Asset::Background(f)) => Ok((id, f)),
        (id, Asset::Object(_)) => Err(Failure::general(format!("asset {id} is an object, expected a background"))),
    }
}

fn region_map(field: &VoxelField<f32>, config: &PipelineConfig, ego: Option<[f64; 2]>) -> Result<ValidRegionMap, Failure> {
    let map = pillar_stats(field, &config.pillar)?;
    Ok(match ego {
        Some([x, y]) => occlusion_filter(map, voxaug::geometry::Vec2::new(x, y))?,
        None => map,
    })
}

fn map_image(map: &ValidRegionMap) -> RgbImage {
    let [nx, ny] = map.dims;
    let mut colors = vec![[0.0; 3]; nx * ny];
    for i in 0..nx {
        for j in 0..ny {
            // Rows run from +y at the top to -y at the bottom.
            colors[(ny - 1 - j) * nx + i] = match map.state[map.index(i, j)] {
                CellState::Valid => [0.2, 0.75, 0.3],
                CellState::Invalid => [0.8, 0.2, 0.2],
                CellState::Occluded => [0.45, 0.45, 0.45],
            };
        }
    }
    RgbImage::from_colors(nx as u32, ny as u32, &colors)
}

pub fn validregion(args: &ValidRegionArgs, ego: Option<[f64; 2]>, config: &PipelineConfig) -> Outcome {
    let store = AssetStore::open(config.store_dir())?;
    let (id, field) = background_field(&store, &args.background)?;
    let map = region_map(&field, config, ego.or(config.ego))?;
    let dir = config.output_dir();
    create_dir(&dir)?;
    write_json(&dir.join("validregion.json"), &map)?;
    map_image(&map).save(dir.join("validregion.ppm"))?;
    Ok(json!({
        "command": "validregion",
        "background": id,
        "ground": map.ground,
        "dims": map.dims,
        "valid": map.count(CellState::Valid),
        "invalid": map.count(CellState::Invalid),
        "occluded": map.count(CellState::Occluded),
    }))
}

fn rescale(camera: &CameraModel, resolution: Option<[u32; 2]>) -> Result<CameraModel, Failure> {
    let Some([w, h]) = resolution else {
        return Ok(*camera);
    };
    let sx = w as f64 / camera.width as f64;
    let sy = h as f64 / camera.height as f64;
    Ok(CameraModel::new(camera.fx * sx, camera.fy * sy, camera.cx * sx, camera.cy * sy, w, h, camera.pose)?)
}

pub fn compose(args: &ComposeArgs, ego: Option<[f64; 2]>, config: &PipelineConfig) -> Outcome {
    let store = AssetStore::open(config.store_dir())?;
    let (bg_id, field) = background_field(&store, &args.background)?;
    let mut pool = Vec::with_capacity(args.objects.len());
    for reference in &args.objects {
        match store.resolve(reference)? {
            (id, Asset::Object(o)) => pool.push(AssetEntry { id, size: o.size() }),
            (id, Asset::Background(_)) => return Err(Failure::general(format!("asset {id} is a background, expected an object"))),
        }
    }
    let (originals, cameras): (Vec<Box3D>, Vec<CameraModel>) = match manifest_path(args.manifest.as_ref(), config) {
        Ok(path) if args.manifest.is_some() || config.paths.manifest.is_some() => {
            let m = load_manifest(&path)?;
            let frames = if args.frames.is_empty() { vec![0] } else { args.frames.clone() };
            let mut cams = Vec::new();
            for &f in &frames {
                let fr = m.frames.get(f).ok_or_else(|| Failure::general(format!("manifest has no frame {f}")))?;
                cams.push(fr.camera(f)?);
            }
            (m.frames[frames[0]].boxes.iter().map(|b| b.bbox).collect(), cams)
        }
        _ => {
            let [x, y] = config.ego.unwrap_or([0.0, 0.0]);
            let [w, h] = config.render.resolution.unwrap_or([320, 240]);
            let eye = Vec3::new(x, y, 1.6);
            let pose = Pose::look_at(eye, eye + Vec3::new(10.0, 0.0, -0.6), Vec3::z())?;
            (vec![], vec![CameraModel::with_fov(w, h, 70f64.to_radians(), pose)?])
        }
    };
    let ego = ego
        .or(config.ego)
        .or_else(|| cameras.first().map(|c| [c.center().x, c.center().y]));
    let map = region_map(&field, config, ego)?;
    if map.count(CellState::Valid) == 0 {
        return Err(Failure::new(NO_VALID_REGION, "background has no valid placement cell"));
    }
    let mut compose = config.compose;
    if let Some(n) = args.count {
        compose.count = n;
    }
    if args.uniform {
        compose.base = BaseSampling::Uniform;
    }
    if let Some(t) = args.tx {
        compose.jitter.t_x = t;
    }
    if let Some(t) = args.ty {
        compose.jitter.t_y = t;
    }
    if let Some(t) = args.ttheta {
        compose.jitter.t_theta = t.to_radians();
    }
    let inputs = ComposeInputs {
        background: &bg_id,
        map: &map,
        pool: &pool,
        originals: &originals,
        cameras: &cameras,
    };
    let scenes = generate_batch(&inputs, &compose)?;
    let dir = config.output_dir().join("scenes");
    create_dir(&dir)?;
    let mut files = Vec::with_capacity(scenes.len());
    for s in &scenes {
        let p = dir.join(format!("scene_{:04}.json", s.index));
        write_json(&p, s)?;
        files.push(p);
    }
    Ok(json!({
        "command": "compose",
        "background": bg_id,
        "scenes": files,
        "placements": scenes.iter().map(|s| s.placements.len()).collect::<Vec<_>>(),
        "valid_cells": map.count(CellState::Valid),
    }))
}

pub fn render(args: &RenderArgs, config: &PipelineConfig) -> Outcome {
    let text = std::fs::read_to_string(&args.scene).map_err(|e| Failure::general(format!("{}: {e}", args.scene.display())))?;
    let graph: SceneGraph = serde_json::from_str(&text)?;
    let store = AssetStore::open(config.store_dir())?;
    let background = match store.get(&graph.background)? {
        Asset::Background(f) => f,
        Asset::Object(_) => return Err(Failure::general("scene background is an object asset")),
    };
    let mut assets: BTreeMap<String, ObjectAsset> = BTreeMap::new();
    for p in &graph.placements {
        if !assets.contains_key(&p.asset) {
            match store.get(&p.asset)? {
                Asset::Object(o) => assets.insert(p.asset.clone(), o),
                Asset::Background(_) => return Err(Failure::general(format!("asset {} is not an object", p.asset))),
            };
        }
    }
    let view = scene_view(&graph, &background, &assets)?;
    let dir = config.output_dir().join("render");
    create_dir(&dir)?;
    let cams: Vec<usize> = match args.camera {
        Some(c) => vec![c],
        None => (0..graph.cameras.len()).collect(),
    };
    let mut written = Vec::new();
    for c in cams {
        let mut annotation = graph.annotation(c)?;
        let camera = rescale(&annotation.camera, config.render.resolution)?;
        annotation.camera = camera;
        let img = render_scene(&view, &camera, &config.render.options())?;
        let stem = dir.join(format!("scene_{:04}_cam{c:02}", graph.index));
        let ppm = stem.with_extension("ppm");
        let pgm = stem.with_extension("pgm");
        let ann = stem.with_extension("json");
        RgbImage::from_colors(img.width, img.height, &img.color).save(&ppm)?;
        DepthMap::from_meters(img.width, img.height, &img.depth, &img.depth_valid).save(&pgm)?;
        write_json(&ann, &annotation)?;
        written.push(json!({ "image": ppm, "depth": pgm, "annotation": ann }));
    }
    Ok(json!({ "command": "render", "scene": graph.index, "outputs": written }))
}
