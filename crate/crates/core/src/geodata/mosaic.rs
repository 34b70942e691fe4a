use super::{GeoError, Grid, InstanceMask, LabelRaster, Result};

/// Merge instance masks into one label raster.
///
/// Each pixel takes the id of the highest-scoring instance covering it, ties
/// going to the lower id, so the result does not depend on input order.
pub fn mosaic(instances: &[InstanceMask], grid: &Grid) -> Result<LabelRaster> {
    if let Some(bad) = instances
        .iter()
        .find(|i| !grid.same_shape(i.mask().width(), i.mask().height()))
    {
        return Err(GeoError::Shape(format!(
            "instance {} is {}x{}, mosaic grid is {}x{}",
            bad.instance_id,
            bad.mask().width(),
            bad.mask().height(),
            grid.width,
            grid.height
        )));
    }
    let mut order: Vec<&InstanceMask> = instances.iter().collect();
    // lowest priority first; later writes win
    order.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then_with(|| b.instance_id.cmp(&a.instance_id))
    });
    let mut data = vec![0u32; grid.len()];
    for inst in order {
        for (cell, &on) in data.iter_mut().zip(inst.mask().data()) {
            if on {
                *cell = inst.instance_id;
            }
        }
    }
    LabelRaster::new(grid.clone(), data)
}
