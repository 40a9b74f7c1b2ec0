//! Generate the procedural cross-spectral toy world in both modalities and
//! write a small five-split dataset to disk.

use crossflow::data::{
    make_splits, toy_world_generate, write_split, Modality, SplitSizes, ToyWorldSpec, SPLIT_NAMES,
};

fn main() -> crossflow::Result<()> {
    for modality in [Modality::IrLike, Modality::SarLike] {
        let spec = ToyWorldSpec { modality, seed: 21, ..Default::default() };
        let samples = toy_world_generate(&spec, 8);
        let n_boxes: usize = samples.iter().map(|s| s.boxes.as_ref().unwrap().len()).sum();
        println!(
            "{:?}: {} samples, {} boxes, classes {:?}",
            modality,
            samples.len(),
            n_boxes,
            spec.class_names()
        );
        for s in &samples[..2] {
            let b = &s.boxes.as_ref().unwrap()[0];
            println!(
                "  {}: first box class {} at [{:.1},{:.1},{:.1},{:.1}]",
                s.id, b.class_id, b.x_min, b.y_min, b.x_max, b.y_max
            );
        }
    }

    let out = std::env::temp_dir().join("crossflow_toy_world");
    let spec = ToyWorldSpec { seed: 3, ..Default::default() };
    let sizes = SplitSizes { sensor_sample: 6, sensor_val: 3, train: 8, val: 2, test: 5 };
    let samples = toy_world_generate(&spec, sizes.total());
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let splits = make_splits(&ids, &sizes, 1)?;
    for split in SPLIT_NAMES {
        let subset: Vec<_> = samples
            .iter()
            .filter(|s| splits.get(split).unwrap().contains(&s.id))
            .cloned()
            .collect();
        let manifest = write_split(&out, split, &subset)?;
        println!(
            "wrote {:<13} {} images, hash {}...",
            split,
            manifest.ids.len(),
            &manifest.content_hash[..12]
        );
    }
    println!("dataset under {}", out.display());
    Ok(())
}
