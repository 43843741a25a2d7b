//! Select filtering and the crop-and-zoom perception function.

use std::sync::Arc;

use image::imageops::{self, FilterType};
use image::RgbaImage;
use serde::{Deserialize, Serialize};

use crate::retrieval::{CandidateSet, Corpus};
use crate::types::{BBox, PageImage, PixelSource};

#[derive(Debug, thiserror::Error)]
pub enum PerceptionError {
    #[error("no selectable candidates for indices {0:?}")]
    EmptySelection(Vec<usize>),
    #[error("box {0} lies outside the {1}x{2} image")]
    DegenerateBox(BBox, u32, u32),
    #[error("crop {0}x{1} is below the minimum side of {2} pixels")]
    CropTooSmall(i64, i64, u32),
    #[error("raster for {doc_id} could not be read: {source}")]
    Raster {
        doc_id: String,
        #[source]
        source: image::ImageError,
    },
    #[error("raster for {doc_id} is {actual:?}, page declares {declared:?}")]
    RasterMismatch {
        doc_id: String,
        actual: (u32, u32),
        declared: (u32, u32),
    },
    #[error("invalid zoom config: target_long_side {0} < min_crop_side {1}")]
    BadConfig(u32, u32),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Nearest,
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZoomConfig {
    pub target_long_side: u32,
    pub min_crop_side: u32,
    pub interpolation: Interpolation,
}

impl Default for ZoomConfig {
    fn default() -> Self {
        Self {
            target_long_side: 1344,
            min_crop_side: 28,
            interpolation: Interpolation::Nearest,
        }
    }
}

impl ZoomConfig {
    pub fn validate(&self) -> Result<(), PerceptionError> {
        if self.min_crop_side == 0 || self.target_long_side < self.min_crop_side {
            return Err(PerceptionError::BadConfig(
                self.target_long_side,
                self.min_crop_side,
            ));
        }
        Ok(())
    }
}

/// Proposes candidate regions of interest on a page (layout analysis).
/// Proposals must lie within the page bounds.
pub trait LayoutProvider: Send + Sync {
    fn propose(&self, page: &PageImage) -> Vec<BBox>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectOutcome {
    pub pages: Vec<PageImage>,
    /// Indices that did not name a candidate.
    pub dropped: Vec<usize>,
}

/// Keeps the candidates at `indices`, first occurrence order, duplicates removed.
pub fn select_images(
    candidates: &CandidateSet,
    corpus: &Corpus,
    indices: &[usize],
) -> Result<SelectOutcome, PerceptionError> {
    let mut taken = Vec::new();
    let mut dropped = Vec::new();
    for &i in indices {
        if i >= candidates.entries.len() {
            dropped.push(i);
        } else if !taken.contains(&i) {
            taken.push(i);
        }
    }
    let pages: Vec<PageImage> = taken
        .into_iter()
        .filter_map(|i| corpus.get(&candidates.entries[i].doc_id).cloned())
        .collect();
    if pages.is_empty() {
        return Err(PerceptionError::EmptySelection(indices.to_vec()));
    }
    Ok(SelectOutcome { pages, dropped })
}

/// Clips a box to `[0,width]×[0,height]`.
pub fn clamp_bbox(b: BBox, width: u32, height: u32) -> Result<BBox, PerceptionError> {
    let (w, h) = (i64::from(width), i64::from(height));
    let clipped = BBox {
        x1: b.x1.clamp(0, w),
        y1: b.y1.clamp(0, h),
        x2: b.x2.clamp(0, w),
        y2: b.y2.clamp(0, h),
    };
    if clipped.x2 - clipped.x1 < 1 || clipped.y2 - clipped.y1 < 1 {
        return Err(PerceptionError::DegenerateBox(b, width, height));
    }
    Ok(clipped)
}

/// Output size after zooming a `w`×`h` crop: upscale so the long side hits
/// the target, never downscale.
pub fn zoomed_size(w: u32, h: u32, target_long_side: u32) -> (u32, u32) {
    let long = w.max(h);
    if long >= target_long_side {
        return (w, h);
    }
    let scale_short = |short: u32| -> u32 {
        let num = u64::from(short) * u64::from(target_long_side);
        let den = u64::from(long);
        (((2 * num + den) / (2 * den)) as u32).max(1)
    };
    if w >= h {
        (target_long_side, scale_short(h))
    } else {
        (scale_short(w), target_long_side)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CroppedImage {
    pub source_doc_id: String,
    /// The clamped region in source pixel coordinates.
    pub bbox: BBox,
    pub image: PageImage,
}

fn load_raster(page: &PageImage) -> Result<Option<Arc<RgbaImage>>, PerceptionError> {
    let raster = match &page.source {
        PixelSource::Virtual => return Ok(None),
        PixelSource::Memory { png } => png.clone(),
        PixelSource::File { path } => Arc::new(
            image::open(path)
                .map_err(|source| PerceptionError::Raster {
                    doc_id: page.doc_id.clone(),
                    source,
                })?
                .to_rgba8(),
        ),
    };
    if raster.dimensions() != (page.width, page.height) {
        return Err(PerceptionError::RasterMismatch {
            doc_id: page.doc_id.clone(),
            actual: raster.dimensions(),
            declared: (page.width, page.height),
        });
    }
    Ok(Some(raster))
}

/// Crops `region` out of `page` and zooms it. `crop_index` numbers the crop
/// within its trajectory and goes into the output doc id.
pub fn crop_zoom(
    page: &PageImage,
    region: BBox,
    cfg: &ZoomConfig,
    crop_index: usize,
) -> Result<CroppedImage, PerceptionError> {
    let b = clamp_bbox(region, page.width, page.height)?;
    let min = i64::from(cfg.min_crop_side);
    if b.width() < min || b.height() < min {
        return Err(PerceptionError::CropTooSmall(
            b.width(),
            b.height(),
            cfg.min_crop_side,
        ));
    }
    let (cw, ch) = (b.width() as u32, b.height() as u32);
    let (ow, oh) = zoomed_size(cw, ch, cfg.target_long_side);
    let source = match load_raster(page)? {
        None => PixelSource::Virtual,
        Some(raster) => {
            let cropped =
                imageops::crop_imm(raster.as_ref(), b.x1 as u32, b.y1 as u32, cw, ch).to_image();
            let out = if (ow, oh) == (cw, ch) {
                cropped
            } else {
                let filter = match cfg.interpolation {
                    Interpolation::Nearest => FilterType::Nearest,
                    Interpolation::Bilinear => FilterType::Triangle,
                };
                imageops::resize(&cropped, ow, oh, filter)
            };
            PixelSource::Memory { png: Arc::new(out) }
        }
    };
    Ok(CroppedImage {
        source_doc_id: page.doc_id.clone(),
        bbox: b,
        image: PageImage {
            doc_id: format!("{}#crop{}", page.doc_id, crop_index),
            width: ow,
            height: oh,
            source,
            text_proxy: page.text_proxy.clone(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::Candidate;
    use proptest::prelude::*;

    fn bb(x1: i64, y1: i64, x2: i64, y2: i64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn corpus3() -> (Corpus, CandidateSet) {
        let pages = ["d1", "d3", "d9"]
            .iter()
            .map(|d| PageImage::new(*d, 100, 100, *d).unwrap())
            .collect();
        let corpus = Corpus::new(pages).unwrap();
        let set = CandidateSet {
            step_index: 0,
            k: 3,
            entries: ["d3", "d1", "d9"]
                .iter()
                .map(|d| Candidate {
                    doc_id: d.to_string(),
                    score: 0.0,
                })
                .collect(),
        };
        (corpus, set)
    }

    fn ids(out: &SelectOutcome) -> Vec<&str> {
        out.pages.iter().map(|p| p.doc_id.as_str()).collect()
    }

    #[test]
    fn select_by_rank() {
        let (corpus, set) = corpus3();
        assert_eq!(ids(&select_images(&set, &corpus, &[1]).unwrap()), ["d1"]);
        let out = select_images(&set, &corpus, &[0, 0, 2]).unwrap();
        assert_eq!(ids(&out), ["d3", "d9"]);
        let out = select_images(&set, &corpus, &[2, 5]).unwrap();
        assert_eq!(ids(&out), ["d9"]);
        assert_eq!(out.dropped, [5]);
        assert!(matches!(
            select_images(&set, &corpus, &[7]),
            Err(PerceptionError::EmptySelection(_))
        ));
    }

    #[test]
    fn clamp_examples() {
        assert_eq!(
            clamp_bbox(bb(-5, -5, 50, 50), 100, 100).unwrap(),
            bb(0, 0, 50, 50)
        );
        assert_eq!(
            clamp_bbox(bb(10, 10, 20, 20), 100, 100).unwrap(),
            bb(10, 10, 20, 20)
        );
        assert!(matches!(
            clamp_bbox(bb(200, 200, 300, 300), 100, 100),
            Err(PerceptionError::DegenerateBox(..))
        ));
    }

    #[test]
    fn zoom_examples() {
        let page = PageImage::new("p", 1000, 1000, "").unwrap();
        let cfg = ZoomConfig {
            target_long_side: 640,
            ..ZoomConfig::default()
        };
        let out = crop_zoom(&page, bb(100, 100, 200, 200), &cfg, 0).unwrap();
        assert_eq!((out.image.width, out.image.height), (640, 640));
        assert_eq!(out.image.doc_id, "p#crop0");

        let full = crop_zoom(&page, bb(0, 0, 1000, 1000), &cfg, 1).unwrap();
        assert_eq!((full.image.width, full.image.height), (1000, 1000));

        assert!(matches!(
            crop_zoom(&page, bb(0, 0, 10, 10), &ZoomConfig::default(), 0),
            Err(PerceptionError::CropTooSmall(10, 10, 28))
        ));
    }

    #[test]
    fn raster_crop_uses_nearest_neighbour() {
        let mut img = RgbaImage::new(40, 40);
        for (x, y, px) in img.enumerate_pixels_mut() {
            *px = image::Rgba([x as u8, y as u8, 0, 255]);
        }
        let page = PageImage::new("r", 40, 40, "")
            .unwrap()
            .with_source(PixelSource::Memory { png: Arc::new(img) });
        let cfg = ZoomConfig {
            target_long_side: 60,
            min_crop_side: 2,
            ..ZoomConfig::default()
        };
        let out = crop_zoom(&page, bb(10, 20, 40, 30), &cfg, 0).unwrap();
        assert_eq!((out.image.width, out.image.height), (60, 20));
        let PixelSource::Memory { png } = &out.image.source else {
            panic!("expected raster output")
        };
        assert_eq!(png.dimensions(), (60, 20));
        // 2x upscale: output (0,0) and (1,1) both sample source (10,20)
        assert_eq!(png.get_pixel(0, 0).0[..2], [10, 20]);
        assert_eq!(png.get_pixel(59, 19).0[..2], [39, 29]);
    }

    #[test]
    fn mismatched_raster_is_reported() {
        let page = PageImage::new("r", 50, 50, "")
            .unwrap()
            .with_source(PixelSource::Memory {
                png: Arc::new(RgbaImage::new(40, 40)),
            });
        assert!(matches!(
            crop_zoom(&page, bb(0, 0, 40, 40), &ZoomConfig::default(), 0),
            Err(PerceptionError::RasterMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn aspect_ratio_preserved(
            w in 1u32..4000, h in 1u32..4000,
            x in 0i64..2000, y in 0i64..2000, bw in 28i64..2000, bh in 28i64..2000,
        ) {
            let page = PageImage::new("p", w.max(60), h.max(60), "").unwrap();
            let cfg = ZoomConfig::default();
            if let Ok(out) = crop_zoom(&page, bb(x, y, x + bw, y + bh), &cfg, 0) {
                let (cw, ch) = (out.bbox.width() as f64, out.bbox.height() as f64);
                let (ow, oh) = (out.image.width as f64, out.image.height as f64);
                if cw >= ch {
                    prop_assert!((oh - ch * ow / cw).abs() <= 1.0);
                } else {
                    prop_assert!((ow - cw * oh / ch).abs() <= 1.0);
                }
                let again = crop_zoom(
                    &out.image,
                    bb(0, 0, i64::from(out.image.width), i64::from(out.image.height)),
                    &ZoomConfig { min_crop_side: 1, ..cfg },
                    1,
                ).unwrap();
                prop_assert_eq!(
                    (again.image.width, again.image.height),
                    (out.image.width, out.image.height)
                );
            }
        }
    }
}
