use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::imagecore::Image;
use crate::models::{MaskSource, ModelBundle};
use crate::scenegen::{render_pair, sample_layout, sample_objects, sample_seed, sample_sun, GenerationParams, SamplePair, SceneSpec};

use super::{model_outputs, EvalError, GlobalDescriptor};

/// Mean descriptor distance before and after object removal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceShift {
    pub before: f64,
    pub after: f64,
    /// `100 (after - before) / before`.
    pub change_percent: f64,
}

impl DistanceShift {
    fn new(before: f64, after: f64) -> Self {
        let change_percent = if before > 0.0 { 100.0 * (after - before) / before } else { 0.0 };
        Self { before, after, change_percent }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotReport {
    pub descriptor: String,
    pub locations: usize,
    pub variants: usize,
    /// Distances among variants of one location.
    pub same_place: DistanceShift,
    /// Distances between locations sharing an object setup.
    pub different_place: DistanceShift,
    pub same_place_reduction_percent: f64,
    pub different_place_increase_percent: f64,
    pub nn_accuracy_before: f64,
    pub nn_accuracy_after: f64,
}

/// `locations x variants` renders: each location keeps its layout and light,
/// each variant index draws its objects from the same seed at every location.
pub fn pilot_scenes(
    params: &GenerationParams,
    locations: usize,
    variants: usize,
    seed: u64,
) -> Result<Vec<Vec<SamplePair>>, EvalError> {
    if locations < 2 || variants < 2 {
        return Err(EvalError::Config(format!("pilot needs >= 2 locations and variants, got {locations} x {variants}")));
    }
    params.validate()?;
    (0..locations)
        .map(|l| {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, "pilot-location", l));
            let layout = sample_layout(&mut rng, params.town);
            let sun = sample_sun(&mut rng, params);
            (0..variants)
                .map(|v| {
                    let mut orng = ChaCha8Rng::seed_from_u64(sample_seed(seed, "pilot-variant", v));
                    let spec = SceneSpec {
                        seed: sample_seed(seed, "pilot-location", l),
                        height: params.height,
                        width: params.width,
                        layout: layout.clone(),
                        objects: sample_objects(&mut orng, &layout, params),
                        sun: sun.clone(),
                    };
                    let mut pair = render_pair(&spec);
                    pair.id = format!("l{l:03}-v{v:03}");
                    Ok(pair)
                })
                .collect()
        })
        .collect()
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

struct Geometry {
    same: f64,
    different: f64,
    accuracy: f64,
}

fn measure(desc: &[Vec<GlobalDescriptor>]) -> Geometry {
    let (l, v) = (desc.len(), desc[0].len());
    let mut same = Vec::new();
    for loc in desc {
        for a in 0..v {
            for b in a + 1..v {
                same.push(loc[a].distance(&loc[b]));
            }
        }
    }
    let mut different = Vec::new();
    for k in 0..v {
        for a in 0..l {
            for b in a + 1..l {
                different.push(desc[a][k].distance(&desc[b][k]));
            }
        }
    }
    let mut hits = 0usize;
    for qa in 0..l {
        for qk in 0..v {
            let mut best = (f64::INFINITY, usize::MAX);
            for ga in 0..l {
                for gk in 0..v {
                    if (ga, gk) == (qa, qk) {
                        continue;
                    }
                    let d = desc[qa][qk].distance(&desc[ga][gk]);
                    if d < best.0 {
                        best = (d, ga);
                    }
                }
            }
            hits += (best.1 == qa) as usize;
        }
    }
    Geometry { same: mean(&same), different: mean(&different), accuracy: hits as f64 / (l * v) as f64 }
}

/// Compare descriptor geometry of the dynamic renders with that of their
/// object-free reconstructions produced by `remove`.
pub fn place_recognition_pilot(
    scenes: &[Vec<SamplePair>],
    remove: &mut dyn FnMut(&[SamplePair]) -> Result<Vec<Image>, EvalError>,
) -> Result<PilotReport, EvalError> {
    let variants = scenes.first().map_or(0, Vec::len);
    if scenes.len() < 2 || variants < 2 || scenes.iter().any(|s| s.len() != variants) {
        return Err(EvalError::Config("pilot needs >= 2 locations with the same >= 2 variants each".into()));
    }
    let before: Vec<Vec<GlobalDescriptor>> =
        scenes.iter().map(|s| s.iter().map(|p| GlobalDescriptor::compute(&p.dynamic_img)).collect()).collect();
    let after = scenes
        .iter()
        .map(|s| {
            let out = remove(s)?;
            if out.len() != s.len() {
                return Err(EvalError::Shape(format!("{} reconstructions for {} renders", out.len(), s.len())));
            }
            Ok(out.iter().map(GlobalDescriptor::compute).collect())
        })
        .collect::<Result<Vec<Vec<_>>, EvalError>>()?;
    let (b, a) = (measure(&before), measure(&after));
    let same_place = DistanceShift::new(b.same, a.same);
    let different_place = DistanceShift::new(b.different, a.different);
    Ok(PilotReport {
        descriptor: "hand-crafted substitute: 8x8 block means + 2x2x8 gradient-orientation histogram".into(),
        locations: scenes.len(),
        variants,
        same_place,
        different_place,
        same_place_reduction_percent: -same_place.change_percent,
        different_place_increase_percent: different_place.change_percent,
        nn_accuracy_before: b.accuracy,
        nn_accuracy_after: a.accuracy,
    })
}

/// Pilot with a trained bundle doing the removal.
pub fn pilot_with_model(
    bundle: &ModelBundle,
    scenes: &[Vec<SamplePair>],
    source: MaskSource,
    batch_size: usize,
) -> Result<PilotReport, EvalError> {
    place_recognition_pilot(scenes, &mut |pairs| model_outputs(bundle, pairs, source, batch_size))
}
