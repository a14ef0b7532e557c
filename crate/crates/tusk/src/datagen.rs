//! Procedural desk-scale datasets: multi-tetromino scenes and multi-glyph
//! canvases, with full ground truth (class, center, box, mask). Glyphs come
//! from a deterministic stroke-drawn set or from MNIST IDX files.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Result, TuskError};
use crate::par;
use crate::rng;

/// Side length of a glyph bitmap (square).
pub const GLYPH_SIZE: usize = 28;
/// Ink extent of procedural glyphs inside the bitmap.
const GLYPH_INK: f64 = 19.0;

/// A bank of class-labelled grayscale glyph bitmaps in [0,1].
#[derive(Clone)]
pub struct GlyphSet {
    /// (class_id, bitmap) pairs; bitmaps are `size x size` row-major.
    pub glyphs: Vec<(usize, Vec<f32>)>,
    pub n_classes: usize,
    pub size: usize,
    pub source: String,
}

impl std::fmt::Debug for GlyphSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "GlyphSet({} glyphs, {} classes, {}px, {})",
            self.glyphs.len(),
            self.n_classes,
            self.size,
            self.source
        )
    }
}

impl GlyphSet {
    fn by_class(&self) -> Vec<Vec<usize>> {
        let mut buckets = vec![Vec::new(); self.n_classes];
        for (i, (c, _)) in self.glyphs.iter().enumerate() {
            buckets[*c].push(i);
        }
        buckets
    }
}

/// The 19 one-sided tetrominoes (rotations distinct) and 6 colors.
pub struct TetShapeTable {
    /// Cell lists, each exactly 4 cells, coordinates (x, y).
    pub shapes: Vec<Vec<(usize, usize)>>,
    /// RGB colors, 0..=255.
    pub colors: Vec<[u8; 3]>,
}

impl TetShapeTable {
    pub fn standard() -> Self {
        let shapes: Vec<Vec<(usize, usize)>> = vec![
            // I
            vec![(0, 0), (1, 0), (2, 0), (3, 0)],
            vec![(0, 0), (0, 1), (0, 2), (0, 3)],
            // O
            vec![(0, 0), (1, 0), (0, 1), (1, 1)],
            // T
            vec![(0, 1), (1, 1), (2, 1), (1, 0)],
            vec![(0, 0), (0, 1), (0, 2), (1, 1)],
            vec![(0, 0), (1, 0), (2, 0), (1, 1)],
            vec![(1, 0), (1, 1), (1, 2), (0, 1)],
            // S
            vec![(1, 0), (2, 0), (0, 1), (1, 1)],
            vec![(0, 0), (0, 1), (1, 1), (1, 2)],
            // Z
            vec![(0, 0), (1, 0), (1, 1), (2, 1)],
            vec![(1, 0), (0, 1), (1, 1), (0, 2)],
            // L
            vec![(0, 0), (0, 1), (0, 2), (1, 2)],
            vec![(0, 0), (1, 0), (2, 0), (0, 1)],
            vec![(0, 0), (1, 0), (1, 1), (1, 2)],
            vec![(2, 0), (0, 1), (1, 1), (2, 1)],
            // J
            vec![(1, 0), (1, 1), (0, 2), (1, 2)],
            vec![(0, 0), (0, 1), (1, 1), (2, 1)],
            vec![(0, 0), (1, 0), (0, 1), (0, 2)],
            vec![(0, 0), (1, 0), (2, 0), (2, 1)],
        ];
        let colors = vec![
            [255, 0, 0],
            [0, 255, 0],
            [0, 0, 255],
            [255, 255, 0],
            [255, 0, 255],
            [0, 255, 255],
        ];
        TetShapeTable { shapes, colors }
    }
}

/// One annotated instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub class_id: usize,
    /// (x, y), pixel centers, top-left origin.
    pub center: [f32; 2],
    /// (x0, y0, x1, y1); x1/y1 exclusive.
    pub bbox: [f32; 4],
    /// Binary mask, row-major `H x W`; not serialized to JSON (lives in the
    /// label image).
    #[serde(skip)]
    pub mask: Vec<bool>,
}

/// One image with ground truth.
#[derive(Clone, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    /// `(H, W, 3)` in [0,1], quantized to 8-bit levels.
    pub image: Tensor<f32>,
    pub instances: Vec<Instance>,
    /// Complement of all instance masks.
    pub background: Vec<bool>,
}

impl std::fmt::Debug for Sample {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Sample({}x{}, {} instances)",
            self.width,
            self.height,
            self.instances.len()
        )
    }
}

impl Sample {
    fn finish(height: usize, width: usize, rgb: Vec<u8>, instances: Vec<Instance>) -> Sample {
        let background: Vec<bool> = (0..height * width)
            .map(|p| instances.iter().all(|i| !i.mask[p]))
            .collect();
        let image = Tensor::new(
            vec![height, width, 3],
            rgb.iter().map(|&v| v as f32 / 255.0).collect(),
        )
        .expect("sample image shape");
        Sample {
            height,
            width,
            image,
            instances,
            background,
        }
    }

    /// Label image: 0 = background, i+1 = instance i.
    pub fn label_map(&self) -> Vec<u32> {
        let mut labels = vec![0u32; self.height * self.width];
        for (i, inst) in self.instances.iter().enumerate() {
            for (p, &m) in inst.mask.iter().enumerate() {
                if m {
                    labels[p] = (i + 1) as u32;
                }
            }
        }
        labels
    }
}

/// Tetromino scene generation settings.
#[derive(Clone, Debug)]
pub struct TetrominoConfig {
    pub image_size: usize,
    pub n_objects_min: usize,
    pub n_objects_max: usize,
    /// Use the first `n_shapes` of the 19-entry table.
    pub n_shapes: usize,
    /// Use the first `n_colors` of the 6 colors.
    pub n_colors: usize,
    pub cell_px: usize,
    pub max_retries: usize,
}

impl Default for TetrominoConfig {
    fn default() -> Self {
        TetrominoConfig {
            image_size: 32,
            n_objects_min: 3,
            n_objects_max: 3,
            n_shapes: 19,
            n_colors: 6,
            cell_px: 5,
            max_retries: 100,
        }
    }
}

/// Place `n_objects` non-overlapping tetrominoes uniformly at random on a
/// black canvas. `class_id = shape_index * n_colors + color_index` over the
/// configured subsets.
pub fn gen_tetromino_scene(rng_seed: u64, cfg: &TetrominoConfig, n_objects: usize) -> Result<Sample> {
    let table = TetShapeTable::standard();
    if cfg.n_shapes == 0 || cfg.n_shapes > table.shapes.len() {
        return Err(TuskError::InvalidParameter {
            name: "n_shapes",
            reason: format!("must be in 1..={}, got {}", table.shapes.len(), cfg.n_shapes),
        });
    }
    if cfg.n_colors == 0 || cfg.n_colors > table.colors.len() {
        return Err(TuskError::InvalidParameter {
            name: "n_colors",
            reason: format!("must be in 1..={}, got {}", table.colors.len(), cfg.n_colors),
        });
    }
    let mut r = rng::derive(rng_seed, "tetromino", &[]);
    let size = cfg.image_size;
    let mut occupied = vec![false; size * size];
    let mut rgb = vec![0u8; size * size * 3];
    let mut instances = Vec::with_capacity(n_objects);

    for _obj in 0..n_objects {
        let mut placed = false;
        for _retry in 0..cfg.max_retries {
            let si = r.gen_range(0..cfg.n_shapes);
            let ci = r.gen_range(0..cfg.n_colors);
            let cells = &table.shapes[si];
            let pw = (cells.iter().map(|c| c.0).max().unwrap() + 1) * cfg.cell_px;
            let ph = (cells.iter().map(|c| c.1).max().unwrap() + 1) * cfg.cell_px;
            if pw > size || ph > size {
                continue;
            }
            let x0 = r.gen_range(0..=size - pw);
            let y0 = r.gen_range(0..=size - ph);
            let mut pixels = Vec::with_capacity(cells.len() * cfg.cell_px * cfg.cell_px);
            let mut clash = false;
            'cells: for &(cxr, cyr) in cells {
                for dy in 0..cfg.cell_px {
                    for dx in 0..cfg.cell_px {
                        let px = x0 + cxr * cfg.cell_px + dx;
                        let py = y0 + cyr * cfg.cell_px + dy;
                        let p = py * size + px;
                        if occupied[p] {
                            clash = true;
                            break 'cells;
                        }
                        pixels.push(p);
                    }
                }
            }
            if clash {
                continue;
            }
            let color = table.colors[ci];
            let mut mask = vec![false; size * size];
            for &p in &pixels {
                occupied[p] = true;
                mask[p] = true;
                rgb[p * 3] = color[0];
                rgb[p * 3 + 1] = color[1];
                rgb[p * 3 + 2] = color[2];
            }
            instances.push(Instance {
                class_id: si * cfg.n_colors + ci,
                center: [
                    x0 as f32 + (pw as f32 - 1.0) / 2.0,
                    y0 as f32 + (ph as f32 - 1.0) / 2.0,
                ],
                bbox: [x0 as f32, y0 as f32, (x0 + pw) as f32, (y0 + ph) as f32],
                mask,
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(TuskError::PlacementInfeasible(n_objects, cfg.max_retries));
        }
    }
    Ok(Sample::finish(size, size, rgb, instances))
}

/// Glyph canvas generation settings.
#[derive(Clone, Debug)]
pub struct GlyphCanvasConfig {
    pub canvas_size: usize,
    pub n_glyphs: usize,
    pub min_center_dist: f64,
    pub max_retries: usize,
    /// Recorded box side around each center (the paper's digit size).
    pub box_size: f32,
    /// Minimum center distance from the canvas edge. Glyph bitmaps may clip
    /// at the border as long as the ink box stays inside.
    pub center_margin: usize,
}

impl Default for GlyphCanvasConfig {
    fn default() -> Self {
        GlyphCanvasConfig {
            canvas_size: 64,
            n_glyphs: 4,
            min_center_dist: 20.0,
            max_retries: 100,
            box_size: 20.0,
            center_margin: 10,
        }
    }
}

/// Stamp glyphs onto a black canvas at rejection-sampled positions with all
/// pairwise center distances >= `min_center_dist`. Classes are drawn
/// uniformly with repetition; overlapping ink combines by max, and each
/// pixel's mask goes to the instance holding that max (ties to the earlier
/// instance).
pub fn gen_glyph_canvas(
    rng_seed: u64,
    cfg: &GlyphCanvasConfig,
    glyphs: &GlyphSet,
) -> Result<Sample> {
    let size = cfg.canvas_size;
    if size < glyphs.size {
        return Err(TuskError::InvalidParameter {
            name: "canvas_size",
            reason: format!("canvas {size} smaller than glyph {}", glyphs.size),
        });
    }
    let margin = cfg.center_margin.min(size / 2 - 1);
    let mut r = rng::derive(rng_seed, "glyph_canvas", &[]);
    let buckets = glyphs.by_class();

    // rejection-sample positions; on a dead end, restart the whole layout
    let mut centers: Vec<(usize, usize)> = Vec::with_capacity(cfg.n_glyphs);
    let mut placed_all = cfg.n_glyphs == 0;
    'layout: for _restart in 0..cfg.max_retries.max(1) {
        centers.clear();
        for _ in 0..cfg.n_glyphs {
            let mut ok = false;
            for _retry in 0..cfg.max_retries {
                let cx = r.gen_range(margin..=size - 1 - margin);
                let cy = r.gen_range(margin..=size - 1 - margin);
                let far_enough = centers.iter().all(|&(ox, oy)| {
                    let dx = cx as f64 - ox as f64;
                    let dy = cy as f64 - oy as f64;
                    (dx * dx + dy * dy).sqrt() >= cfg.min_center_dist
                });
                if far_enough {
                    centers.push((cx, cy));
                    ok = true;
                    break;
                }
            }
            if !ok {
                continue 'layout;
            }
        }
        placed_all = true;
        break;
    }
    if !placed_all {
        return Err(TuskError::PlacementInfeasible(cfg.n_glyphs, cfg.max_retries));
    }

    // draw class + variant per placement
    let mut picks = Vec::with_capacity(cfg.n_glyphs);
    for _ in 0..cfg.n_glyphs {
        let class = r.gen_range(0..glyphs.n_classes);
        let variants = &buckets[class];
        if variants.is_empty() {
            return Err(TuskError::InvalidParameter {
                name: "glyphset",
                reason: format!("class {class} has no glyphs"),
            });
        }
        picks.push(variants[r.gen_range(0..variants.len())]);
    }
    let (gray, winner) = stamp_glyphs(size, &centers, &picks, glyphs);
    let metas: Vec<(usize, usize, usize)> = picks
        .iter()
        .zip(centers.iter())
        .map(|(&gi, &(cx, cy))| (glyphs.glyphs[gi].0, cx, cy))
        .collect();

    // quantize to 8 bit before masks so mask == visible ink
    let q: Vec<u8> = gray.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let mut instances = Vec::with_capacity(cfg.n_glyphs);
    for (i, &(class, cx, cy)) in metas.iter().enumerate() {
        let mask: Vec<bool> = (0..size * size)
            .map(|p| winner[p] == i as i32 && q[p] > 0)
            .collect();
        let hb = cfg.box_size / 2.0;
        instances.push(Instance {
            class_id: class,
            center: [cx as f32, cy as f32],
            bbox: [cx as f32 - hb, cy as f32 - hb, cx as f32 + hb, cy as f32 + hb],
            mask,
        });
    }
    let mut rgb = vec![0u8; size * size * 3];
    for p in 0..size * size {
        rgb[p * 3] = q[p];
        rgb[p * 3 + 1] = q[p];
        rgb[p * 3 + 2] = q[p];
    }
    Ok(Sample::finish(size, size, rgb, instances))
}

/// Stamp glyph bitmaps centered at the given positions; overlapping ink
/// combines by pixelwise max, and each pixel records the instance holding
/// the max (ties stay with the earlier instance).
pub fn stamp_glyphs(
    size: usize,
    centers: &[(usize, usize)],
    glyph_indices: &[usize],
    glyphs: &GlyphSet,
) -> (Vec<f32>, Vec<i32>) {
    let gs = glyphs.size;
    let half = gs as isize / 2;
    let mut gray = vec![0f32; size * size];
    let mut winner: Vec<i32> = vec![-1; size * size];
    for (i, (&(cx, cy), &gi)) in centers.iter().zip(glyph_indices.iter()).enumerate() {
        let bitmap = &glyphs.glyphs[gi].1;
        let (x0, y0) = (cx as isize - half, cy as isize - half);
        for gy in 0..gs {
            let py = y0 + gy as isize;
            if py < 0 || py >= size as isize {
                continue;
            }
            for gx in 0..gs {
                let px = x0 + gx as isize;
                if px < 0 || px >= size as isize {
                    continue;
                }
                let v = bitmap[gy * gs + gx];
                if v <= 0.0 {
                    continue;
                }
                let p = py as usize * size + px as usize;
                if v > gray[p] {
                    gray[p] = v;
                    winner[p] = i as i32;
                }
            }
        }
    }
    (gray, winner)
}

/// Translate a design so its length-weighted stroke centroid sits at the
/// box center (MNIST digits are centroid-centered the same way).
fn center_design(segments: &mut [[f64; 4]]) {
    let mut cx = 0.0;
    let mut cy = 0.0;
    let mut total = 0.0;
    for s in segments.iter() {
        let len = ((s[2] - s[0]).powi(2) + (s[3] - s[1]).powi(2)).sqrt().max(1e-9);
        cx += len * (s[0] + s[2]) / 2.0;
        cy += len * (s[1] + s[3]) / 2.0;
        total += len;
    }
    cx /= total;
    cy /= total;
    for s in segments.iter_mut() {
        s[0] += 0.5 - cx;
        s[1] += 0.5 - cy;
        s[2] += 0.5 - cx;
        s[3] += 0.5 - cy;
    }
}

/// Stroke designs for up to 16 procedural glyph classes, as segment lists in
/// the unit square.
fn glyph_designs() -> Vec<Vec<[f64; 4]>> {
    let circle = |n: usize, r: f64, cx: f64, cy: f64| -> Vec<[f64; 4]> {
        (0..n)
            .map(|i| {
                let a0 = i as f64 / n as f64 * std::f64::consts::TAU;
                let a1 = (i + 1) as f64 / n as f64 * std::f64::consts::TAU;
                [
                    cx + r * a0.cos(),
                    cy + r * a0.sin(),
                    cx + r * a1.cos(),
                    cy + r * a1.sin(),
                ]
            })
            .collect()
    };
    let mut designs = vec![
        // 0: circle
        circle(12, 0.42, 0.5, 0.5),
        // 1: vertical bar
        vec![[0.5, 0.05, 0.5, 0.95]],
        // 2: Z
        vec![[0.1, 0.1, 0.9, 0.1], [0.9, 0.1, 0.1, 0.9], [0.1, 0.9, 0.9, 0.9]],
        // 3: triangle
        vec![[0.5, 0.08, 0.92, 0.88], [0.92, 0.88, 0.08, 0.88], [0.08, 0.88, 0.5, 0.08]],
        // 4: X
        vec![[0.1, 0.1, 0.9, 0.9], [0.9, 0.1, 0.1, 0.9]],
        // 5: U
        vec![[0.12, 0.08, 0.12, 0.8], [0.12, 0.8, 0.5, 0.95], [0.5, 0.95, 0.88, 0.8], [0.88, 0.8, 0.88, 0.08]],
        // 6: horizontal bar
        vec![[0.05, 0.5, 0.95, 0.5]],
        // 7: plus
        vec![[0.5, 0.08, 0.5, 0.92], [0.08, 0.5, 0.92, 0.5]],
        // 8: square outline
        vec![[0.15, 0.15, 0.85, 0.15], [0.85, 0.15, 0.85, 0.85], [0.85, 0.85, 0.15, 0.85], [0.15, 0.85, 0.15, 0.15]],
        // 9: diagonal
        vec![[0.12, 0.88, 0.88, 0.12]],
        // 10: T
        vec![[0.08, 0.12, 0.92, 0.12], [0.5, 0.12, 0.5, 0.92]],
        // 11: L
        vec![[0.2, 0.08, 0.2, 0.88], [0.2, 0.88, 0.88, 0.88]],
        // 12: seven
        vec![[0.1, 0.1, 0.9, 0.1], [0.9, 0.1, 0.35, 0.9]],
        // 13: V
        vec![[0.1, 0.1, 0.5, 0.9], [0.5, 0.9, 0.9, 0.1]],
        // 14: N
        vec![[0.15, 0.9, 0.15, 0.1], [0.15, 0.1, 0.85, 0.9], [0.85, 0.9, 0.85, 0.1]],
        // 15: H
        vec![[0.18, 0.08, 0.18, 0.92], [0.82, 0.08, 0.82, 0.92], [0.18, 0.5, 0.82, 0.5]],
    ];
    for d in &mut designs {
        center_design(d);
    }
    designs
}

fn dist_to_segment(px: f64, py: f64, s: &[f64; 4]) -> f64 {
    let (x0, y0, x1, y1) = (s[0], s[1], s[2], s[3]);
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (x0 + t * dx, y0 + t * dy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

fn rasterize_glyph(segments: &[[f64; 4]], thickness: f64) -> Vec<f32> {
    let mut out = vec![0f32; GLYPH_SIZE * GLYPH_SIZE];
    let off = (GLYPH_SIZE as f64 - GLYPH_INK) / 2.0;
    let mut maxv = 0f32;
    for y in 0..GLYPH_SIZE {
        for x in 0..GLYPH_SIZE {
            // map pixel into unit design space
            let ux = (x as f64 - off) / GLYPH_INK;
            let uy = (y as f64 - off) / GLYPH_INK;
            let d_px = segments
                .iter()
                .map(|s| dist_to_segment(ux, uy, s))
                .fold(f64::INFINITY, f64::min)
                * GLYPH_INK;
            let v = (1.0 - (d_px - thickness / 2.0)).clamp(0.0, 1.0) as f32;
            out[y * GLYPH_SIZE + x] = v;
            maxv = maxv.max(v);
        }
    }
    if maxv > 0.0 {
        for v in &mut out {
            *v /= maxv;
        }
    }
    out
}

/// Deterministic stroke-drawn glyphs: `n_classes` distinct designs, variant 0
/// canonical, later variants jittered (shift/rotation/scale/thickness).
pub fn gen_procedural_glyphs(
    rng_seed: u64,
    n_classes: usize,
    variants_per_class: usize,
) -> Result<GlyphSet> {
    let designs = glyph_designs();
    if n_classes == 0 || n_classes > designs.len() {
        return Err(TuskError::InvalidParameter {
            name: "n_classes",
            reason: format!("must be in 1..={}, got {n_classes}", designs.len()),
        });
    }
    if variants_per_class == 0 {
        return Err(TuskError::InvalidParameter {
            name: "variants_per_class",
            reason: "must be >= 1".into(),
        });
    }
    let mut glyphs = Vec::with_capacity(n_classes * variants_per_class);
    for class in 0..n_classes {
        let base = &designs[class];
        for variant in 0..variants_per_class {
            let mut r = rng::derive(rng_seed, "glyph_variant", &[class as u64, variant as u64]);
            let segments: Vec<[f64; 4]> = if variant == 0 {
                base.clone()
            } else {
                let theta = r.gen_range(-0.15..0.15f64);
                let scale = 1.0 + r.gen_range(-0.1..0.1f64);
                let (tx, ty) = (r.gen_range(-0.06..0.06f64), r.gen_range(-0.06..0.06f64));
                let (cos, sin) = (theta.cos(), theta.sin());
                let warp = |x: f64, y: f64| -> (f64, f64) {
                    let (rx, ry) = ((x - 0.5) * scale, (y - 0.5) * scale);
                    (0.5 + cos * rx - sin * ry + tx, 0.5 + sin * rx + cos * ry + ty)
                };
                base.iter()
                    .map(|s| {
                        let (ax, ay) = warp(s[0], s[1]);
                        let (bx, by) = warp(s[2], s[3]);
                        [ax, ay, bx, by]
                    })
                    .collect()
            };
            let thickness = if variant == 0 {
                2.4
            } else {
                2.4 + r.gen_range(-0.5..0.5f64)
            };
            glyphs.push((class, rasterize_glyph(&segments, thickness)));
        }
    }
    Ok(GlyphSet {
        glyphs,
        n_classes,
        size: GLYPH_SIZE,
        source: "procedural".into(),
    })
}

fn read_be_u32(buf: &[u8], at: usize, path: &Path, field: &str) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| TuskError::format(path, format!("truncated {field}")))
}

/// Load MNIST-style IDX image/label files into a [`GlyphSet`].
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<GlyphSet> {
    let mut ibuf = Vec::new();
    fs::File::open(images_path)
        .map_err(|e| TuskError::io(images_path, e))?
        .read_to_end(&mut ibuf)
        .map_err(|e| TuskError::io(images_path, e))?;
    let magic = read_be_u32(&ibuf, 0, images_path, "image magic")?;
    if magic != 0x0000_0803 {
        return Err(TuskError::format(
            images_path,
            format!("bad image magic {magic:#010x}, expected 0x00000803"),
        ));
    }
    let count = read_be_u32(&ibuf, 4, images_path, "image count")? as usize;
    let rows = read_be_u32(&ibuf, 8, images_path, "rows")? as usize;
    let cols = read_be_u32(&ibuf, 12, images_path, "cols")? as usize;
    if rows != cols {
        return Err(TuskError::format(
            images_path,
            format!("non-square glyphs {rows}x{cols} unsupported"),
        ));
    }
    let need = 16 + count * rows * cols;
    if ibuf.len() < need {
        return Err(TuskError::format(
            images_path,
            format!("truncated image payload: {} < {need} bytes", ibuf.len()),
        ));
    }

    let mut lbuf = Vec::new();
    fs::File::open(labels_path)
        .map_err(|e| TuskError::io(labels_path, e))?
        .read_to_end(&mut lbuf)
        .map_err(|e| TuskError::io(labels_path, e))?;
    let lmagic = read_be_u32(&lbuf, 0, labels_path, "label magic")?;
    if lmagic != 0x0000_0801 {
        return Err(TuskError::format(
            labels_path,
            format!("bad label magic {lmagic:#010x}, expected 0x00000801"),
        ));
    }
    let lcount = read_be_u32(&lbuf, 4, labels_path, "label count")? as usize;
    if lcount != count {
        return Err(TuskError::format(
            labels_path,
            format!("label count {lcount} != image count {count}"),
        ));
    }
    if lbuf.len() < 8 + count {
        return Err(TuskError::format(
            labels_path,
            format!("truncated label payload: {} < {} bytes", lbuf.len(), 8 + count),
        ));
    }

    let px = rows * cols;
    let mut glyphs = Vec::with_capacity(count);
    let mut n_classes = 0usize;
    for i in 0..count {
        let label = lbuf[8 + i] as usize;
        n_classes = n_classes.max(label + 1);
        let start = 16 + i * px;
        let bitmap: Vec<f32> = ibuf[start..start + px].iter().map(|&b| b as f32 / 255.0).collect();
        glyphs.push((label, bitmap));
    }
    Ok(GlyphSet {
        glyphs,
        n_classes,
        size: rows,
        source: "mnist-idx".into(),
    })
}

// ---- dataset persistence ------------------------------------------------

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub image_size: [usize; 2],
    pub classes: Vec<String>,
    pub n_samples: usize,
    pub kind: String,
}

#[derive(Serialize, Deserialize)]
struct Annotation {
    instances: Vec<Instance>,
}

fn sample_paths(dir: &Path, i: usize) -> (std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
    (
        dir.join(format!("images/{i:06}.png")),
        dir.join(format!("annotations/{i:06}.json")),
        dir.join(format!("masks/{i:06}.png")),
    )
}

/// Write a dataset directory: `meta.json`, `images/%06d.png` (8-bit RGB),
/// `annotations/%06d.json`, `masks/%06d.png` (label image).
pub fn write_dataset(samples: &[Sample], meta: &DatasetMeta, dir: &Path) -> Result<()> {
    for sub in ["images", "annotations", "masks"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| TuskError::io(dir.join(sub), e))?;
    }
    let meta_path = dir.join("meta.json");
    let meta = DatasetMeta {
        n_samples: samples.len(),
        ..meta.clone()
    };
    fs::write(
        &meta_path,
        serde_json::to_vec_pretty(&meta).map_err(|e| TuskError::Json {
            path: meta_path.clone(),
            source: e,
        })?,
    )
    .map_err(|e| TuskError::io(&meta_path, e))?;

    for (i, s) in samples.iter().enumerate() {
        if s.instances.len() > 255 {
            return Err(TuskError::InvalidParameter {
                name: "instances",
                reason: "label image supports at most 255 instances".into(),
            });
        }
        let (img_path, ann_path, mask_path) = sample_paths(dir, i);
        let rgb: Vec<u8> = s
            .image
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let img = image::RgbImage::from_raw(s.width as u32, s.height as u32, rgb)
            .expect("image buffer size");
        img.save(&img_path).map_err(|e| TuskError::format(&img_path, e.to_string()))?;

        let labels = s.label_map();
        let mask_img = image::GrayImage::from_raw(
            s.width as u32,
            s.height as u32,
            labels.iter().map(|&l| l as u8).collect(),
        )
        .expect("mask buffer size");
        mask_img
            .save(&mask_path)
            .map_err(|e| TuskError::format(&mask_path, e.to_string()))?;

        let ann = Annotation {
            instances: s.instances.clone(),
        };
        fs::write(
            &ann_path,
            serde_json::to_vec_pretty(&ann).map_err(|e| TuskError::Json {
                path: ann_path.clone(),
                source: e,
            })?,
        )
        .map_err(|e| TuskError::io(&ann_path, e))?;
    }
    Ok(())
}

/// Read a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(DatasetMeta, Vec<Sample>)> {
    let meta_path = dir.join("meta.json");
    let meta_bytes = fs::read(&meta_path).map_err(|e| TuskError::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_slice(&meta_bytes).map_err(|e| TuskError::Json {
        path: meta_path.clone(),
        source: e,
    })?;
    if meta.schema_version != SCHEMA_VERSION {
        return Err(TuskError::format(
            &meta_path,
            format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                meta.schema_version
            ),
        ));
    }
    let mut samples = Vec::with_capacity(meta.n_samples);
    for i in 0..meta.n_samples {
        let (img_path, ann_path, mask_path) = sample_paths(dir, i);
        let img = image::open(&img_path)
            .map_err(|e| TuskError::format(&img_path, e.to_string()))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let image = Tensor::new(
            vec![h, w, 3],
            img.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        )?;
        let ann_bytes = fs::read(&ann_path).map_err(|e| TuskError::io(&ann_path, e))?;
        let ann: Annotation = serde_json::from_slice(&ann_bytes).map_err(|e| TuskError::Json {
            path: ann_path.clone(),
            source: e,
        })?;
        let mask_img = image::open(&mask_path)
            .map_err(|e| TuskError::format(&mask_path, e.to_string()))?
            .to_luma8();
        let labels: &[u8] = mask_img.as_raw();
        let mut instances = ann.instances;
        for (idx, inst) in instances.iter_mut().enumerate() {
            inst.mask = labels.iter().map(|&l| l as usize == idx + 1).collect();
        }
        let background: Vec<bool> = labels.iter().map(|&l| l == 0).collect();
        samples.push(Sample {
            height: h,
            width: w,
            image,
            instances,
            background,
        });
    }
    Ok((meta, samples))
}

// ---- batch generation helpers --------------------------------------------

/// Generate `n` tetromino scenes with per-sample derived seeds (object count
/// uniform in `[n_objects_min, n_objects_max]`).
pub fn gen_tetromino_dataset(seed: u64, n: usize, cfg: &TetrominoConfig) -> Result<Vec<Sample>> {
    let results = par::map_range(n, |i| {
        let mut r = rng::derive(seed, "tet_count", &[i as u64]);
        let count = r.gen_range(cfg.n_objects_min..=cfg.n_objects_max);
        let sample_seed: u64 = rng::derive(seed, "tet_sample", &[i as u64]).gen();
        gen_tetromino_scene(sample_seed, cfg, count)
    });
    results.into_iter().collect()
}

/// Generate `n` glyph canvases with per-sample derived seeds.
pub fn gen_glyph_dataset(
    seed: u64,
    n: usize,
    cfg: &GlyphCanvasConfig,
    glyphs: &GlyphSet,
) -> Result<Vec<Sample>> {
    let results = par::map_range(n, |i| {
        let sample_seed: u64 = rng::derive(seed, "glyph_sample", &[i as u64]).gen();
        gen_glyph_canvas(sample_seed, cfg, glyphs)
    });
    results.into_iter().collect()
}

/// Class-name table for a tetromino subset.
pub fn tetromino_class_names(n_shapes: usize, n_colors: usize) -> Vec<String> {
    let mut names = Vec::with_capacity(n_shapes * n_colors);
    for s in 0..n_shapes {
        for c in 0..n_colors {
            names.push(format!("shape{s:02}_color{c}"));
        }
    }
    names
}

pub fn glyph_class_names(n_classes: usize) -> Vec<String> {
    (0..n_classes).map(|c| format!("glyph{c:02}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_table_has_19_tetrominoes_and_6_colors() {
        let t = TetShapeTable::standard();
        assert_eq!(t.shapes.len(), 19);
        assert_eq!(t.colors.len(), 6);
        for s in &t.shapes {
            assert_eq!(s.len(), 4, "every tetromino has 4 cells");
        }
        // distinct shapes
        for i in 0..19 {
            for j in i + 1..19 {
                assert_ne!(t.shapes[i], t.shapes[j]);
            }
        }
    }

    #[test]
    fn tetromino_scene_invariants() {
        let cfg = TetrominoConfig::default();
        let s = gen_tetromino_scene(42, &cfg, 3).unwrap();
        assert_eq!(s.instances.len(), 3);
        // class ids in 0..114
        for inst in &s.instances {
            assert!(inst.class_id < 19 * 6);
        }
        // disjoint masks
        for p in 0..s.height * s.width {
            let covering = s.instances.iter().filter(|i| i.mask[p]).count();
            assert!(covering <= 1);
            assert_eq!(s.background[p], covering == 0);
        }
        // image in [0,1]
        assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn tetromino_single_object_background_is_complement() {
        let cfg = TetrominoConfig::default();
        let s = gen_tetromino_scene(7, &cfg, 1).unwrap();
        assert_eq!(s.instances.len(), 1);
        for p in 0..s.height * s.width {
            assert_eq!(s.background[p], !s.instances[0].mask[p]);
        }
    }

    #[test]
    fn fixed_seed_reproduces_sample() {
        let cfg = TetrominoConfig::default();
        let a = gen_tetromino_scene(9, &cfg, 3).unwrap();
        let b = gen_tetromino_scene(9, &cfg, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn glyph_canvas_counts_and_boxes() {
        let glyphs = gen_procedural_glyphs(0, 4, 3).unwrap();
        let cfg = GlyphCanvasConfig {
            canvas_size: 84,
            n_glyphs: 9,
            min_center_dist: 20.0,
            max_retries: 1000,
            ..Default::default()
        };
        let s = gen_glyph_canvas(5, &cfg, &glyphs).unwrap();
        assert_eq!(s.instances.len(), 9);
        for inst in &s.instances {
            let [x0, y0, x1, y1] = inst.bbox;
            assert!((x1 - x0 - 20.0).abs() < 1e-6);
            assert!((y1 - y0 - 20.0).abs() < 1e-6);
            assert!((inst.center[0] - (x0 + x1) / 2.0).abs() < 1e-6);
        }
        // pairwise center distance >= 20
        for i in 0..9 {
            for j in i + 1..9 {
                let a = s.instances[i].center;
                let b = s.instances[j].center;
                let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                assert!(d >= 20.0 - 1e-6);
            }
        }
    }

    #[test]
    fn glyph_canvas_empty_scene() {
        let glyphs = gen_procedural_glyphs(0, 2, 1).unwrap();
        let cfg = GlyphCanvasConfig {
            n_glyphs: 0,
            ..Default::default()
        };
        let s = gen_glyph_canvas(1, &cfg, &glyphs).unwrap();
        assert!(s.instances.is_empty());
        assert!(s.image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn procedural_glyphs_deterministic_and_distinct() {
        let a = gen_procedural_glyphs(3, 4, 10).unwrap();
        let b = gen_procedural_glyphs(3, 4, 10).unwrap();
        assert_eq!(a.glyphs.len(), 40);
        assert_eq!(a.n_classes, 4);
        for (ga, gb) in a.glyphs.iter().zip(b.glyphs.iter()) {
            assert_eq!(ga.0, gb.0);
            assert_eq!(ga.1, gb.1);
        }
        // canonical prototypes pairwise L1 >= 10
        let protos: Vec<&Vec<f32>> = (0..4).map(|c| &a.glyphs[c * 10].1).collect();
        for i in 0..4 {
            for j in i + 1..4 {
                let l1: f32 = protos[i]
                    .iter()
                    .zip(protos[j].iter())
                    .map(|(x, y)| (x - y).abs())
                    .sum();
                assert!(l1 >= 10.0, "classes {i},{j}: L1 = {l1}");
            }
        }
    }

    #[test]
    fn procedural_glyph_class_bound() {
        assert!(gen_procedural_glyphs(0, 17, 1).is_err());
    }

    #[test]
    fn max_combine_at_same_position() {
        // two stamps forced to the identical center: canvas = pixelwise max
        let glyphs = gen_procedural_glyphs(0, 2, 1).unwrap();
        let size = 40;
        let (gray, _) = stamp_glyphs(size, &[(20, 20), (20, 20)], &[0, 1], &glyphs);
        let a = &glyphs.glyphs[0].1;
        let b = &glyphs.glyphs[1].1;
        for gy in 0..28 {
            for gx in 0..28 {
                let p = (6 + gy) * size + 6 + gx;
                let expect = a[gy * 28 + gx].max(b[gy * 28 + gx]);
                assert_eq!(gray[p], expect);
            }
        }
    }

    #[test]
    fn dataset_roundtrip_lossless() {
        let cfg = TetrominoConfig::default();
        let samples: Vec<Sample> = (0..4)
            .map(|i| gen_tetromino_scene(100 + i, &cfg, 2).unwrap())
            .collect();
        let meta = DatasetMeta {
            schema_version: SCHEMA_VERSION,
            image_size: [32, 32],
            classes: tetromino_class_names(19, 6),
            n_samples: 0,
            kind: "tetromino".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&samples, &meta, dir.path()).unwrap();
        let (meta2, loaded) = read_dataset(dir.path()).unwrap();
        assert_eq!(meta2.n_samples, 4);
        assert_eq!(loaded.len(), 4);
        for (a, b) in samples.iter().zip(loaded.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn empty_dataset_roundtrip() {
        let meta = DatasetMeta {
            schema_version: SCHEMA_VERSION,
            image_size: [32, 32],
            classes: vec![],
            n_samples: 0,
            kind: "tetromino".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&[], &meta, dir.path()).unwrap();
        let (_, loaded) = read_dataset(dir.path()).unwrap();
        assert!(loaded.is_empty());
    }

    #[test]
    fn corrupted_annotation_reports_path() {
        let cfg = TetrominoConfig::default();
        let samples = vec![gen_tetromino_scene(1, &cfg, 1).unwrap()];
        let meta = DatasetMeta {
            schema_version: SCHEMA_VERSION,
            image_size: [32, 32],
            classes: vec![],
            n_samples: 0,
            kind: "tetromino".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&samples, &meta, dir.path()).unwrap();
        fs::write(dir.path().join("annotations/000000.json"), b"{ not json").unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("000000.json"), "{err}");
    }

    #[test]
    fn idx_loader_errors() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lbl = dir.path().join("lbl.idx");
        // empty file
        fs::write(&img, b"").unwrap();
        fs::write(&lbl, b"").unwrap();
        assert!(load_mnist_idx(&img, &lbl).is_err());
        // bad magic
        let mut buf = vec![];
        buf.extend_from_slice(&0x0000_0999u32.to_be_bytes());
        buf.extend_from_slice(&1u32.to_be_bytes());
        buf.extend_from_slice(&2u32.to_be_bytes());
        buf.extend_from_slice(&2u32.to_be_bytes());
        buf.extend_from_slice(&[0u8; 4]);
        fs::write(&img, &buf).unwrap();
        let err = load_mnist_idx(&img, &lbl).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn idx_loader_roundtrip_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lbl = dir.path().join("lbl.idx");
        let mut ibuf = vec![];
        ibuf.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        ibuf.extend_from_slice(&2u32.to_be_bytes());
        ibuf.extend_from_slice(&2u32.to_be_bytes());
        ibuf.extend_from_slice(&2u32.to_be_bytes());
        ibuf.extend_from_slice(&[0, 128, 255, 64, 1, 2, 3, 4]);
        fs::write(&img, &ibuf).unwrap();
        let mut lbuf = vec![];
        lbuf.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lbuf.extend_from_slice(&2u32.to_be_bytes());
        lbuf.extend_from_slice(&[3u8, 7u8]);
        fs::write(&lbl, &lbuf).unwrap();
        let set = load_mnist_idx(&img, &lbl).unwrap();
        assert_eq!(set.glyphs.len(), 2);
        assert_eq!(set.n_classes, 8);
        assert_eq!(set.glyphs[0].0, 3);
        assert!((set.glyphs[0].1[1] - 128.0 / 255.0).abs() < 1e-6);

        // count mismatch
        let mut lbuf2 = vec![];
        lbuf2.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lbuf2.extend_from_slice(&3u32.to_be_bytes());
        lbuf2.extend_from_slice(&[3u8, 7u8, 1u8]);
        fs::write(&lbl, &lbuf2).unwrap();
        let err = load_mnist_idx(&img, &lbl).unwrap_err();
        assert!(err.to_string().contains("count"), "{err}");
    }
}
