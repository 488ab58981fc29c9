//! Copy-paste synthesis of multi-person composites.
//!
//! Instances are pasted in order onto a mean-colour canvas; later pastes
//! occlude earlier ones, and each instance's mask is its pasted rectangle
//! minus whatever later instances cover.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::image::ImageView;
use crate::error::{Result, SaipError};
use crate::scalar::Scalar;

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl BBox {
    #[inline]
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceMask<T> {
    /// Composite-resolution occupancy, row-major.
    pub pixel_mask: Vec<bool>,
    /// Fraction of each composite patch covered by `pixel_mask`.
    pub token_mask: Vec<T>,
    pub bbox: BBox,
    pub instance_index: usize,
    pub height: usize,
    pub width: usize,
    pub grid: (usize, usize),
}

impl<T: Scalar> InstanceMask<T> {
    pub fn area(&self) -> usize {
        self.pixel_mask.iter().filter(|&&b| b).count()
    }
}

/// Rasters and positions fully determining a composite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositePlan<T> {
    pub canvas_hw: [usize; 2],
    pub background: [T; 3],
    /// Instance rasters at their pasted size.
    pub instances: Vec<ImageView<T>>,
    pub placements: Vec<BBox>,
}

/// Pasted size of a view: its content scale applied to the anchor size,
/// then shrunk uniformly so the longer side is at most
/// `fit · min(canvas height, canvas width)`.
pub fn instance_size(view_hw: (usize, usize), scale: f64, canvas_hw: [usize; 2], fit: f64) -> (usize, usize) {
    let h = (view_hw.0 as f64 * scale).round().max(1.0);
    let w = (view_hw.1 as f64 * scale).round().max(1.0);
    let limit = (fit * canvas_hw[0].min(canvas_hw[1]) as f64).floor().max(1.0);
    let shrink = (limit / h.max(w)).min(1.0);
    let fh = ((h * shrink + 1e-9).floor() as usize).clamp(1, canvas_hw[0]);
    let fw = ((w * shrink + 1e-9).floor() as usize).clamp(1, canvas_hw[1]);
    (fh, fw)
}

/// Paste order ownership: index of the last instance covering each pixel.
pub fn ownership(canvas_hw: [usize; 2], placements: &[BBox]) -> Vec<Option<usize>> {
    let [ch, cw] = canvas_hw;
    let mut owner = vec![None; ch * cw];
    for (t, b) in placements.iter().enumerate() {
        for y in b.top..b.top + b.height {
            for x in b.left..b.left + b.width {
                owner[y * cw + x] = Some(t);
            }
        }
    }
    owner
}

/// Renders a plan: the composite view and one mask per instance.
pub fn render_composite<T: Scalar>(
    plan: &CompositePlan<T>,
    patch: usize,
    source_id: &str,
) -> Result<(ImageView<T>, Vec<InstanceMask<T>>)> {
    let [ch, cw] = plan.canvas_hw;
    if patch == 0 || ch % patch != 0 || cw % patch != 0 {
        return Err(SaipError::NotPatchAligned {
            height: ch,
            width: cw,
            patch,
        });
    }
    if plan.instances.len() != plan.placements.len() {
        return Err(SaipError::Shape("one placement per instance required".into()));
    }
    for (inst, b) in plan.instances.iter().zip(&plan.placements) {
        if inst.height != b.height || inst.width != b.width || b.top + b.height > ch || b.left + b.width > cw {
            return Err(SaipError::Placement(format!(
                "instance {}x{} does not fit placement {b:?} on {ch}x{cw}",
                inst.height, inst.width
            )));
        }
    }

    let mut canvas = ImageView::filled(ch, cw, plan.background, source_id);
    for (inst, b) in plan.instances.iter().zip(&plan.placements) {
        for y in 0..b.height {
            let src = &inst.pixels[y * b.width * 3..(y + 1) * b.width * 3];
            let start = ((b.top + y) * cw + b.left) * 3;
            canvas.pixels[start..start + b.width * 3].copy_from_slice(src);
        }
    }

    let owner = ownership(plan.canvas_hw, &plan.placements);
    let (gh, gw) = (ch / patch, cw / patch);
    let area = T::from_usize_lossy(patch * patch);
    let masks = plan
        .placements
        .iter()
        .enumerate()
        .map(|(t, &bbox)| {
            let pixel_mask: Vec<bool> = owner.iter().map(|&o| o == Some(t)).collect();
            let mut counts = vec![0usize; gh * gw];
            for y in 0..ch {
                for x in 0..cw {
                    if pixel_mask[y * cw + x] {
                        counts[(y / patch) * gw + x / patch] += 1;
                    }
                }
            }
            InstanceMask {
                pixel_mask,
                token_mask: counts.iter().map(|&c| T::from_usize_lossy(c) / area).collect(),
                bbox,
                instance_index: t,
                height: ch,
                width: cw,
                grid: (gh, gw),
            }
        })
        .collect();
    Ok((canvas, masks))
}

/// Draws placements for rasters of the given sizes until every instance
/// keeps some visible area, or the retry cap runs out.
pub fn draw_placements<R: Rng + ?Sized>(
    sizes: &[(usize, usize)],
    canvas_hw: [usize; 2],
    retries: usize,
    rng: &mut R,
) -> Result<Vec<BBox>> {
    let [ch, cw] = canvas_hw;
    for &(h, w) in sizes {
        if h == 0 || w == 0 || h > ch || w > cw {
            return Err(SaipError::Placement(format!("{h}x{w} instance on {ch}x{cw} canvas")));
        }
    }
    for _ in 0..retries.max(1) {
        let placements: Vec<BBox> = sizes
            .iter()
            .map(|&(h, w)| BBox {
                top: rng.gen_range(0..=ch - h),
                left: rng.gen_range(0..=cw - w),
                height: h,
                width: w,
            })
            .collect();
        let owner = ownership(canvas_hw, &placements);
        let mut visible = vec![false; sizes.len()];
        for t in owner.into_iter().flatten() {
            visible[t] = true;
        }
        if visible.iter().all(|&v| v) {
            return Ok(placements);
        }
    }
    Err(SaipError::Placement(format!(
        "no placement of {} instances left all visible after {retries} attempts",
        sizes.len()
    )))
}

/// Builds a plan from scaled views: each is resized to its pasted size, the
/// canvas takes the mean colour of all instance pixels, and positions are
/// drawn uniformly.
pub fn plan_composite<T: Scalar, R: Rng + ?Sized>(
    scaled: &[ImageView<T>],
    canvas_hw: [usize; 2],
    fit: f64,
    retries: usize,
    rng: &mut R,
) -> Result<CompositePlan<T>> {
    if scaled.is_empty() {
        return Err(SaipError::Invalid("no instances to composite".into()));
    }
    let instances: Vec<ImageView<T>> = scaled
        .iter()
        .map(|v| {
            let (h, w) = instance_size((v.height, v.width), v.scale, canvas_hw, fit);
            v.resized(h, w)
        })
        .collect();

    let mut total = [T::zero(); 3];
    let mut count = 0usize;
    for inst in &instances {
        for px in inst.pixels.chunks_exact(3) {
            for c in 0..3 {
                total[c] += px[c];
            }
        }
        count += inst.height * inst.width;
    }
    let background = total.map(|v| v / T::from_usize_lossy(count));

    let sizes: Vec<(usize, usize)> = instances.iter().map(|i| (i.height, i.width)).collect();
    let placements = draw_placements(&sizes, canvas_hw, retries, rng)?;
    Ok(CompositePlan {
        canvas_hw,
        background,
        instances,
        placements,
    })
}

pub fn synthesize_composite<T: Scalar, R: Rng + ?Sized>(
    scaled: &[ImageView<T>],
    canvas_hw: [usize; 2],
    patch: usize,
    fit: f64,
    retries: usize,
    rng: &mut R,
) -> Result<(ImageView<T>, Vec<InstanceMask<T>>, CompositePlan<T>)> {
    let plan = plan_composite(scaled, canvas_hw, fit, retries, rng)?;
    let source = scaled.first().map(|v| v.source_id.clone()).unwrap_or_default();
    let (canvas, masks) = render_composite(&plan, patch, &source)?;
    Ok((canvas, masks, plan))
}
