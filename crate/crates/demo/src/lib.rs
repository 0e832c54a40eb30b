//! Browser bindings: phantom slices under every annotation protocol, the
//! case sampler, and the learning-rate schedules.

use std::path::Path;

use partseg::collection::{CollectionManifest, ManifestCase, ManifestClass, ManifestDataset, ManifestFile};
use partseg::ndnet::ParamRole;
use partseg::phantom::{annotate, generate_case, GenConfig};
use partseg::sampling::{build_sampler, learning_rate, ScheduleSpec};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn js(e: partseg::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Number of cases in the desk collection.
#[wasm_bindgen]
pub fn desk_case_count() -> usize {
    GenConfig::desk().datasets.iter().map(|d| d.case_count).sum()
}

/// One axial slice of a desk case as JSON: the image, and the case's truth
/// annotated under every dataset's protocol, flagged by whether the case's
/// own dataset labels that class.
pub fn slice_json(seed: u64, case: usize, z: usize) -> partseg::Result<String> {
    let mut config = GenConfig::desk();
    config.seed = seed;
    let c = generate_case(&config, case)?;
    let [x, y, depth] = config.volume_shape;
    let z = z.min(depth - 1);
    let plane = |data: &[f32]| data[z * x * y..(z + 1) * x * y].to_vec();
    let mut classes = Vec::new();
    for (d, spec) in config.datasets.iter().enumerate() {
        for a in &spec.annotations {
            let mask = annotate(&config, &c.truth, a)?.map(f32::from);
            classes.push(json!({
                "dataset": spec.name,
                "name": a.name.clone().unwrap_or_else(|| a.structure.clone()),
                "annotated": d == c.dataset,
                "mask": plane(mask.data()),
            }));
        }
    }
    Ok(json!({
        "width": x,
        "height": y,
        "depth": depth,
        "dataset": config.datasets[c.dataset].name,
        "held_out": c.held_out,
        "image": plane(c.image.data()),
        "classes": classes,
    })
    .to_string())
}

#[wasm_bindgen]
pub fn phantom_slice(seed: u32, case: u32, z: u32) -> Result<String, JsError> {
    slice_json(u64::from(seed), case as usize, z as usize).map_err(js)
}

/// Dataset probabilities of the case sampler for datasets of the given sizes.
pub fn sampler_probabilities(sizes: &[usize]) -> partseg::Result<Vec<f64>> {
    let class = || ManifestClass {
        name: "c".into(),
        group_tags: vec![],
        structure: None,
    };
    let file = ManifestFile {
        structures: vec![],
        datasets: (1..=sizes.len() as u32)
            .map(|id| ManifestDataset {
                id,
                name: format!("d{id}"),
                classes: vec![class()],
                spacing: [1.0; 3],
            })
            .collect(),
        cases: sizes
            .iter()
            .zip(1u32..)
            .flat_map(|(&n, id)| {
                (0..n).map(move |i| ManifestCase {
                    id: None,
                    dataset_id: id,
                    image: format!("{id}_{i}"),
                    masks: vec![format!("{id}_{i}_0")],
                    held_out: false,
                    truth: vec![],
                })
            })
            .collect(),
    };
    let manifest = CollectionManifest::from_file(file, Path::new("/"))?;
    Ok(build_sampler(&manifest)?.dataset_probs.into_values().collect())
}

#[wasm_bindgen]
pub fn sampler_probs(sizes: Vec<u32>) -> Result<Vec<f64>, JsError> {
    let sizes: Vec<usize> = sizes.into_iter().map(|n| n as usize).collect();
    sampler_probabilities(&sizes).map_err(js)
}

/// Learning rate per epoch for the backbone or a head.
pub fn schedule_curve(spec: &ScheduleSpec, head: bool) -> partseg::Result<Vec<f64>> {
    let role = if head { ParamRole::Head(0) } else { ParamRole::Backbone };
    (0..spec.total_epochs).map(|e| learning_rate(spec, e, role)).collect()
}

#[wasm_bindgen]
pub fn lr_curve(
    finetune: bool,
    base_lr: f64,
    epochs: u32,
    head_warmup: u32,
    full_warmup: u32,
    head: bool,
) -> Result<Vec<f64>, JsError> {
    let mut spec = if finetune {
        ScheduleSpec::finetune(base_lr, epochs as usize)
    } else {
        ScheduleSpec::standard(base_lr, epochs as usize)
    };
    spec.head_warmup_epochs = head_warmup as usize;
    spec.full_warmup_epochs = full_warmup as usize;
    schedule_curve(&spec, head).map_err(js)
}
