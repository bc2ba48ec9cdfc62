//! Box coordinate algebra between the relative label frame, the source pixel
//! frame, square letterboxed network inputs and ROI crops.
//!
//! Pixel boxes are real-valued everywhere here; nothing is rounded until a
//! raster is actually cut (see `croppipe`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelio::{ImageDims, NormalizedBox};

/// Default minimum fraction of a box that must stay inside a crop.
pub const DEFAULT_MIN_VISIBILITY: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub class_id: u32,
}

impl PixelBox {
    pub fn new(class_id: u32, x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = PixelBox {
            x_min,
            y_min,
            x_max,
            y_max,
            class_id,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.x_min, self.y_min, self.x_max, self.y_max];
        if !all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::InvalidBox(format!(
                "pixel box {self:?} has a negative or non-finite coordinate"
            )));
        }
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::DegenerateBox(format!(
                "({}, {})-({}, {}) has no area",
                self.x_min, self.y_min, self.x_max, self.y_max
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    /// Overlap rectangle, or `None` when the boxes do not share any area.
    /// The result carries `self`'s class.
    pub fn intersection(&self, other: &PixelBox) -> Option<PixelBox> {
        let x_min = self.x_min.max(other.x_min);
        let y_min = self.y_min.max(other.y_min);
        let x_max = self.x_max.min(other.x_max);
        let y_max = self.y_max.min(other.y_max);
        (x_min < x_max && y_min < y_max).then_some(PixelBox {
            x_min,
            y_min,
            x_max,
            y_max,
            class_id: self.class_id,
        })
    }

    fn clamp_to(&self, dims: ImageDims) -> PixelBox {
        let w = f64::from(dims.width_px);
        let h = f64::from(dims.height_px);
        PixelBox {
            x_min: self.x_min.clamp(0.0, w),
            y_min: self.y_min.clamp(0.0, h),
            x_max: self.x_max.clamp(0.0, w),
            y_max: self.y_max.clamp(0.0, h),
            class_id: self.class_id,
        }
    }
}

/// Relative box to source pixels, clamped to the image.
pub fn to_pixel(b: &NormalizedBox, dims: ImageDims) -> PixelBox {
    let w = f64::from(dims.width_px);
    let h = f64::from(dims.height_px);
    let (x0, y0, x1, y1) = b.corners();
    PixelBox {
        x_min: x0 * w,
        y_min: y0 * h,
        x_max: x1 * w,
        y_max: y1 * h,
        class_id: b.class_id,
    }
    .clamp_to(dims)
}

/// Source pixels back to relative coordinates. Clamps to the image first and
/// fails if nothing with positive area is left.
pub fn to_normalized(b: &PixelBox, dims: ImageDims) -> Result<NormalizedBox> {
    if ![b.x_min, b.y_min, b.x_max, b.y_max]
        .iter()
        .all(|v| v.is_finite())
    {
        return Err(Error::InvalidBox(format!("pixel box {b:?} is not finite")));
    }
    let c = b.clamp_to(dims);
    if c.x_min >= c.x_max || c.y_min >= c.y_max {
        return Err(Error::DegenerateBox(format!(
            "({}, {})-({}, {}) has no area inside {}x{}",
            b.x_min, b.y_min, b.x_max, b.y_max, dims.width_px, dims.height_px
        )));
    }
    let w = f64::from(dims.width_px);
    let h = f64::from(dims.height_px);
    NormalizedBox::new(
        c.class_id,
        (c.x_min + c.x_max) / 2.0 / w,
        (c.y_min + c.y_max) / 2.0 / h,
        (c.x_max - c.x_min) / w,
        (c.y_max - c.y_min) / h,
    )
}

/// Intersection over union. Zero for disjoint boxes.
pub fn iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let inter = a.intersection(b).map_or(0.0, |i| i.area());
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// IoU of two relative boxes. Uniform axis scaling does not change IoU, so
/// this equals the pixel IoU on any image.
pub fn iou_normalized(a: &NormalizedBox, b: &NormalizedBox) -> f64 {
    let unit = ImageDims {
        width_px: 1,
        height_px: 1,
    };
    iou(&to_pixel(a, unit), &to_pixel(b, unit))
}

/// Aspect-preserving fit of a source image into a square input, centered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LetterboxTransform {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub target_side: u32,
}

impl LetterboxTransform {
    /// Rounded pixel size of the resized image inside the square.
    pub fn scaled_size(&self, src: ImageDims) -> (u32, u32) {
        (
            (self.scale * f64::from(src.width_px)).round() as u32,
            (self.scale * f64::from(src.height_px)).round() as u32,
        )
    }

    /// Number of padding pixels in the square input.
    pub fn padded_pixels(&self, src: ImageDims) -> u64 {
        let (w, h) = self.scaled_size(src);
        let side = u64::from(self.target_side);
        side * side - u64::from(w) * u64::from(h)
    }

    pub fn forward_point(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.scale + self.pad_x, y * self.scale + self.pad_y)
    }

    pub fn inverse_point(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.pad_x) / self.scale, (y - self.pad_y) / self.scale)
    }
}

/// Letterbox geometry for fitting `dims` into a `target_side` square.
/// Padding only ever lands on the short axis.
pub fn letterbox(dims: ImageDims, target_side: u32) -> Result<LetterboxTransform> {
    if target_side == 0 {
        return Err(Error::InvalidArgument(
            "target side must be at least 1".into(),
        ));
    }
    let w = f64::from(dims.width_px);
    let h = f64::from(dims.height_px);
    let side = f64::from(target_side);
    let scale = side / w.max(h);
    let (pad_x, pad_y) = if dims.width_px >= dims.height_px {
        (0.0, (side - scale * h) / 2.0)
    } else {
        ((side - scale * w) / 2.0, 0.0)
    };
    Ok(LetterboxTransform {
        scale,
        pad_x,
        pad_y,
        target_side,
    })
}

/// A source-frame relative box in the pixel frame of the letterboxed input.
pub fn apply_letterbox(b: &NormalizedBox, src: ImageDims, t: &LetterboxTransform) -> PixelBox {
    let p = to_pixel(b, src);
    let (x_min, y_min) = t.forward_point(p.x_min, p.y_min);
    let (x_max, y_max) = t.forward_point(p.x_max, p.y_max);
    PixelBox {
        x_min,
        y_min,
        x_max,
        y_max,
        class_id: p.class_id,
    }
}

/// Maps a box in the letterboxed input back to relative source coordinates.
pub fn invert_letterbox(
    b: &PixelBox,
    src: ImageDims,
    t: &LetterboxTransform,
) -> Result<NormalizedBox> {
    let (x_min, y_min) = t.inverse_point(b.x_min, b.y_min);
    let (x_max, y_max) = t.inverse_point(b.x_max, b.y_max);
    to_normalized(
        &PixelBox {
            x_min,
            y_min,
            x_max,
            y_max,
            class_id: b.class_id,
        },
        src,
    )
}

/// A box that survived remapping into a crop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropRemap {
    /// Relative to the crop's own width/height.
    pub box_in_crop: NormalizedBox,
    /// Fraction of the original box area that lies inside the crop.
    pub visibility: f64,
}

/// Re-expresses `b` inside `crop`.
///
/// The box is cut to the crop and normalized against the crop size. It is
/// dropped (`Ok(None)`) when less than `min_visibility` of its area survives
/// or when nothing of it is inside the crop.
pub fn remap_into_crop(
    b: &NormalizedBox,
    crop: &PixelBox,
    src: ImageDims,
    min_visibility: f64,
) -> Result<Option<CropRemap>> {
    if !(0.0..=1.0).contains(&min_visibility) {
        return Err(Error::InvalidArgument(format!(
            "min_visibility {min_visibility} outside [0, 1]"
        )));
    }
    let crop = crop.clamp_to(src);
    if crop.x_min >= crop.x_max || crop.y_min >= crop.y_max {
        return Err(Error::DegenerateBox(format!(
            "crop {crop:?} has no area inside the image"
        )));
    }
    let p = to_pixel(b, src);
    let Some(cut) = p.intersection(&crop) else {
        return Ok(None);
    };
    let area = p.area();
    let visibility = if area > 0.0 { cut.area() / area } else { 0.0 };
    if visibility < min_visibility {
        return Ok(None);
    }
    let cw = crop.width();
    let ch = crop.height();
    let x0 = (cut.x_min - crop.x_min) / cw;
    let x1 = (cut.x_max - crop.x_min) / cw;
    let y0 = (cut.y_min - crop.y_min) / ch;
    let y1 = (cut.y_max - crop.y_min) / ch;
    let (box_in_crop, _) = NormalizedBox::clamped(
        b.class_id,
        (x0 + x1) / 2.0,
        (y0 + y1) / 2.0,
        x1 - x0,
        y1 - y0,
    )?;
    Ok(Some(CropRemap {
        box_in_crop,
        visibility,
    }))
}
