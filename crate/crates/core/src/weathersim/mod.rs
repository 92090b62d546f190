//! Synthetic labelled scenes and their weather degradations.

mod dataset;
mod degrade;
mod scene;

pub use dataset::{
    generate_sample, read_labels, sample_seed, synthesize_dataset, write_labels, DatasetManifest, Domain,
    GeneratedSample, SampleRecord, Split, SplitManifest, SynthConfig, Weather, WeatherParams, MANIFEST_FILE,
};
pub use degrade::{
    apply_haze, apply_rain, apply_rain_blend, apply_snow, apply_snow_blend, directional_autocorrelation,
    gen_rain_mask, gen_snow_mask, transmission, BlendMode, MaskPattern, RainMask, ResidueMask, SEED_THRESHOLD,
};
pub use scene::{
    render_scene, Background, RenderedScene, SceneConfig, SceneObject, SceneSpec, ShapeClass, CLASS_NAMES,
    NUM_CLASSES,
};
