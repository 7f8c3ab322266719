//! Analytic scenes with closed-form density and color, a reference
//! renderer, grid baking, and synthetic dataset generation.

pub mod analytic;
pub mod audit;
pub mod bake;
pub mod dataset;
pub mod oracle;
pub mod scenes;

pub use analytic::{car_primitives, eval_analytic, AnalyticScene, CarStyle, Primitive, Shape, SynthObject, CAR_SIZE};
pub use audit::outside_density;
pub use bake::{bake, BakeReport, GridConfig};
pub use dataset::{generate_dataset, ring_cameras, DatasetSpec, GeneratedDataset, MaskNoise, NoiseMode, ObjectPose, SynthFrame};
pub use oracle::{oracle_render, oracle_render_detailed, oracle_render_with};
pub use scenes::{car_bounds, car_dataset, local_car_cameras, CarShoot, CarViews, StreetScene, WallScene};
