//! Procedural two-subject scene composition.
//!
//! Scenes are assembled directly in token space: subjects are patterns of
//! whole token cells painted with their signature colors, so per-subject
//! masks, signature exclusivity, and background preservation hold exactly by
//! construction instead of by segmentation. Images are derived by decoding
//! the token grids through the palette.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TokenArError};
use crate::rng;
use crate::sequence;
use crate::tokenizer::{dequantize, quantize, Codebook, ImageGrid, TokenGrid};

/// Codebook index reserved for blank cells (reference backdrops and the
/// blanked foreground region of background images).
pub const BLANK_TOKEN: u32 = 0;

/// Subject classes usable in prompts.
pub const CLASS_NAMES: [&str; 16] = [
    "cat", "dog", "robot", "rocket", "tree", "house", "fish", "bird", "car", "lamp", "mug",
    "drone", "plant", "clock", "boat", "kite",
];

/// Spatial relations between subject A and subject B.
pub const RELATION_NAMES: [&str; 11] = [
    "left-of",
    "right-of",
    "above",
    "below",
    "upper-left-of",
    "upper-right-of",
    "lower-left-of",
    "lower-right-of",
    "touching",
    "overlapping",
    "far-from",
];

/// Side length of a subject's local cell pattern.
pub const SUBJECT_SIDE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Disc,
    Triangle,
}

/// One reference subject: a shaped cell pattern in exclusive signature colors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub class_id: u32,
    pub shape: Shape,
    /// 2-4 codebook indices exclusive to this subject within a scene.
    pub signature: Vec<u32>,
    pub pose_seed: u64,
}

/// A boolean grid at token resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<bool>,
}

impl Mask {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            cells: vec![false; rows * cols],
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.cells[row * self.cols + col] = v;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Mask centroid as (row, col); None when empty.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let mut r = 0.0;
        let mut c = 0.0;
        let mut n = 0.0;
        for row in 0..self.rows {
            for col in 0..self.cols {
                if self.at(row, col) {
                    r += row as f64;
                    c += col as f64;
                    n += 1.0;
                }
            }
        }
        if n == 0.0 {
            None
        } else {
            Some((r / n, c / n))
        }
    }
}

/// Placement of a subject pattern: top-left cell plus quarter-turn rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pose {
    pub row: usize,
    pub col: usize,
    pub rotation: u8,
}

/// One dataset record.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub ref_images: [ImageGrid; 2],
    pub background: ImageGrid,
    pub target: ImageGrid,
    /// Per-subject visibility masks in the target, token resolution.
    pub masks: [Mask; 2],
    /// Per-subject foreground masks in the reference images.
    pub ref_masks: [Mask; 2],
    pub relation_id: u32,
    pub prompt: Vec<u32>,
    pub subjects: [SubjectSpec; 2],
    pub ref_poses: [Pose; 2],
    pub target_poses: [Pose; 2],
    pub bg_seed: u64,
}

/// L1-normalized codebook-index histogram of a token region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVec {
    pub values: Vec<f64>,
}

/// Scene geometry plus the palette everything is painted with.
#[derive(Debug, Clone)]
pub struct SceneBuilder {
    pub codebook: Codebook,
    pub patch: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl SceneBuilder {
    pub fn new(codebook: Codebook, patch: usize, grid_rows: usize, grid_cols: usize) -> Result<Self> {
        let min_side = 2 * SUBJECT_SIDE + 1;
        if grid_rows < min_side || grid_cols < min_side {
            return Err(TokenArError::invalid(format!(
                "scene grid must be at least {min_side}x{min_side}, got {grid_rows}x{grid_cols}"
            )));
        }
        if codebook.entries.len() < 12 {
            return Err(TokenArError::invalid(
                "scene generation needs a codebook of at least 12 colors",
            ));
        }
        Ok(SceneBuilder {
            codebook,
            patch,
            grid_rows,
            grid_cols,
        })
    }

    /// Composes a deterministic two-subject scene for the given relation.
    ///
    /// Subjects in the target are repositioned and rotated relative to their
    /// canonical reference depictions; masks are derived from placement, not
    /// segmentation. Subject A is painted last, so on the overlapping
    /// relation it occludes B and mask ownership follows visibility.
    pub fn compose_scene(
        &self,
        subj_a: &SubjectSpec,
        subj_b: &SubjectSpec,
        relation_id: u32,
        bg_seed: u64,
    ) -> Result<SceneSample> {
        self.validate_subject(subj_a)?;
        self.validate_subject(subj_b)?;
        if subj_a.signature.iter().any(|s| subj_b.signature.contains(s)) {
            return Err(TokenArError::invalid(format!(
                "subject signatures overlap: {:?} vs {:?}",
                subj_a.signature, subj_b.signature
            )));
        }
        if relation_id as usize >= RELATION_NAMES.len() {
            return Err(TokenArError::invalid(format!(
                "relation id {relation_id} out of range"
            )));
        }

        let rows = self.grid_rows;
        let cols = self.grid_cols;
        let mut scene_rng = rng::stream(
            mix(bg_seed, subj_a.pose_seed, subj_b.pose_seed, relation_id as u64),
            0x5CE_7E,
        );

        // Target poses: placement drawn from the relation's admissible pairs,
        // rotation always a nonzero quarter turn so the pose never matches
        // the canonical reference depiction.
        let pairs = placement_pairs(rows, cols, relation_id);
        if pairs.is_empty() {
            return Err(TokenArError::invalid(format!(
                "relation {} admits no placement on a {rows}x{cols} grid",
                RELATION_NAMES[relation_id as usize]
            )));
        }
        let ((ar, ac), (br, bc)) = pairs[rand::Rng::gen_range(&mut scene_rng, 0..pairs.len())];
        let rot_a = 1 + (subj_a.pose_seed % 3) as u8;
        let rot_b = 1 + (subj_b.pose_seed % 3) as u8;
        let pose_a = Pose {
            row: ar,
            col: ac,
            rotation: rot_a,
        };
        let pose_b = Pose {
            row: br,
            col: bc,
            rotation: rot_b,
        };

        // Background pattern: per-cell colors from a 3-color palette disjoint
        // from both signatures and the blank token.
        let mut bg_rng = rng::stream(bg_seed, 0xB6);
        let forbidden: Vec<u32> = subj_a
            .signature
            .iter()
            .chain(subj_b.signature.iter())
            .copied()
            .chain([BLANK_TOKEN])
            .collect();
        let k = self.codebook.entries.len() as u32;
        let allowed: Vec<u32> = (0..k).filter(|c| !forbidden.contains(c)).collect();
        if allowed.len() < 3 {
            return Err(TokenArError::invalid(
                "codebook too small for background palette after excluding signatures",
            ));
        }
        let bg_palette: Vec<u32> = (0..3)
            .map(|_| allowed[rand::Rng::gen_range(&mut bg_rng, 0..allowed.len())])
            .collect();
        let mut scene_grid = TokenGrid {
            cols,
            rows,
            tokens: (0..rows * cols)
                .map(|_| bg_palette[rand::Rng::gen_range(&mut bg_rng, 0..3)])
                .collect(),
        };

        // Paint B then A; ownership follows visibility.
        let cells_b = pattern_cells(subj_b.shape, pose_b.rotation);
        let cells_a = pattern_cells(subj_a.shape, pose_a.rotation);
        let mut mask_a = Mask::empty(rows, cols);
        let mut mask_b = Mask::empty(rows, cols);
        paint_subject(&mut scene_grid, &mut mask_b, subj_b, &cells_b, pose_b);
        for (r, c, _) in cells_a.iter().map(|&(r, c, i)| (r, c, i)) {
            mask_b.set(pose_a.row + r, pose_a.col + c, false);
        }
        paint_subject(&mut scene_grid, &mut mask_a, subj_a, &cells_a, pose_a);
        if mask_b.count() == 0 {
            return Err(TokenArError::invalid(
                "subject B fully occluded; placement table must leave it visible",
            ));
        }

        // Background image: same pattern with the foreground blanked.
        let mut bg_grid = scene_grid.clone();
        for row in 0..rows {
            for col in 0..cols {
                if mask_a.at(row, col) || mask_b.at(row, col) {
                    bg_grid.tokens[row * cols + col] = BLANK_TOKEN;
                }
            }
        }

        // References: canonical pose (centered, unrotated) on a blank field.
        let ref_pose = Pose {
            row: (rows - SUBJECT_SIDE) / 2,
            col: (cols - SUBJECT_SIDE) / 2,
            rotation: 0,
        };
        let (ref_grid_a, ref_mask_a) = self.reference_grid(subj_a, ref_pose);
        let (ref_grid_b, ref_mask_b) = self.reference_grid(subj_b, ref_pose);

        let prompt = sequence::encode_prompt(
            self.codebook.entries.len(),
            subj_a.class_id,
            relation_id,
            subj_b.class_id,
        )?;

        Ok(SceneSample {
            ref_images: [
                dequantize(&ref_grid_a, &self.codebook, self.patch)?,
                dequantize(&ref_grid_b, &self.codebook, self.patch)?,
            ],
            background: dequantize(&bg_grid, &self.codebook, self.patch)?,
            target: dequantize(&scene_grid, &self.codebook, self.patch)?,
            masks: [mask_a, mask_b],
            ref_masks: [ref_mask_a, ref_mask_b],
            relation_id,
            prompt,
            subjects: [subj_a.clone(), subj_b.clone()],
            ref_poses: [ref_pose, ref_pose],
            target_poses: [pose_a, pose_b],
            bg_seed,
        })
    }

    fn reference_grid(&self, subj: &SubjectSpec, pose: Pose) -> (TokenGrid, Mask) {
        let mut grid = TokenGrid {
            cols: self.grid_cols,
            rows: self.grid_rows,
            tokens: vec![BLANK_TOKEN; self.grid_rows * self.grid_cols],
        };
        let mut mask = Mask::empty(self.grid_rows, self.grid_cols);
        let cells = pattern_cells(subj.shape, pose.rotation);
        paint_subject(&mut grid, &mut mask, subj, &cells, pose);
        (grid, mask)
    }

    fn validate_subject(&self, s: &SubjectSpec) -> Result<()> {
        let k = self.codebook.entries.len() as u32;
        if s.class_id as usize >= CLASS_NAMES.len() {
            return Err(TokenArError::invalid(format!(
                "class id {} out of range",
                s.class_id
            )));
        }
        if s.signature.len() < 2 || s.signature.len() > 4 {
            return Err(TokenArError::invalid(format!(
                "signature must have 2-4 colors, got {}",
                s.signature.len()
            )));
        }
        for &c in &s.signature {
            if c >= k {
                return Err(TokenArError::invalid(format!(
                    "signature color {c} out of codebook range {k}"
                )));
            }
            if c == BLANK_TOKEN {
                return Err(TokenArError::invalid(
                    "signature may not use the reserved blank token",
                ));
            }
        }
        let mut sorted = s.signature.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != s.signature.len() {
            return Err(TokenArError::invalid("signature colors must be distinct"));
        }
        Ok(())
    }

    /// Quantizes the sample's target image back to tokens.
    pub fn target_tokens(&self, sample: &SceneSample) -> Result<TokenGrid> {
        quantize(&sample.target, &self.codebook, self.patch)
    }
}

fn mix(a: u64, b: u64, c: u64, d: u64) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for v in [a, b, c, d] {
        h ^= v;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Local pattern of a shape as (row, col, color_slot) triples on the
/// SUBJECT_SIDE grid, rotated by quarter turns. Color slots are attached to
/// the unrotated cells, so rotation moves colors with the shape and region
/// histograms are pose-invariant.
pub fn pattern_cells(shape: Shape, rotation: u8) -> Vec<(usize, usize, usize)> {
    let s = SUBJECT_SIDE;
    let base: Vec<(usize, usize)> = match shape {
        Shape::Square => (0..s)
            .flat_map(|r| (0..s).map(move |c| (r, c)))
            .collect(),
        Shape::Disc => {
            let mid = s / 2;
            (0..s)
                .flat_map(|r| (0..s).map(move |c| (r, c)))
                .filter(|&(r, c)| r.abs_diff(mid) + c.abs_diff(mid) <= mid)
                .collect()
        }
        Shape::Triangle => (0..s)
            .flat_map(|r| (0..=r).map(move |c| (r, c)))
            .collect(),
    };
    base.iter()
        .enumerate()
        .map(|(slot, &(r, c))| {
            let (mut rr, mut cc) = (r, c);
            for _ in 0..rotation % 4 {
                let (nr, nc) = (cc, s - 1 - rr);
                rr = nr;
                cc = nc;
            }
            (rr, cc, slot)
        })
        .collect()
}

fn paint_subject(
    grid: &mut TokenGrid,
    mask: &mut Mask,
    subj: &SubjectSpec,
    cells: &[(usize, usize, usize)],
    pose: Pose,
) {
    for &(r, c, slot) in cells {
        let row = pose.row + r;
        let col = pose.col + c;
        grid.tokens[row * grid.cols + col] = subj.signature[slot % subj.signature.len()];
        mask.set(row, col, true);
    }
}

/// All admissible (top-left A, top-left B) placements for a relation.
fn placement_pairs(rows: usize, cols: usize, relation_id: u32) -> Vec<((usize, usize), (usize, usize))> {
    let s = SUBJECT_SIDE;
    let max_r = rows - s;
    let max_c = cols - s;
    let mut out = Vec::new();
    for ar in 0..=max_r {
        for ac in 0..=max_c {
            for br in 0..=max_r {
                for bc in 0..=max_c {
                    let row_overlap = ar < br + s && br < ar + s;
                    let col_overlap = ac < bc + s && bc < ac + s;
                    let boxes_overlap = row_overlap && col_overlap;
                    let ok = match relation_id {
                        0 => ac + s <= bc && row_overlap,
                        1 => bc + s <= ac && row_overlap,
                        2 => ar + s <= br && col_overlap,
                        3 => br + s <= ar && col_overlap,
                        4 => ar + s <= br && ac + s <= bc,
                        5 => ar + s <= br && bc + s <= ac,
                        6 => br + s <= ar && ac + s <= bc,
                        7 => br + s <= ar && bc + s <= ac,
                        8 => {
                            // Side-adjacent, no overlap.
                            !boxes_overlap
                                && ((row_overlap && (ac + s == bc || bc + s == ac))
                                    || (col_overlap && (ar + s == br || br + s == ar)))
                        }
                        9 => {
                            // Boxes intersect but B keeps its far corner visible.
                            boxes_overlap && (ar, ac) != (br, bc) && ar.abs_diff(br) + ac.abs_diff(bc) >= 2
                        }
                        10 => {
                            let dr = (ar as i64 - br as i64).unsigned_abs() as usize;
                            let dc = (ac as i64 - bc as i64).unsigned_abs() as usize;
                            dr + dc >= max_r + max_c - 1
                        }
                        _ => false,
                    };
                    if ok {
                        out.push(((ar, ac), (br, bc)));
                    }
                }
            }
        }
    }
    out
}

/// L1-normalized histogram of codebook indices inside `mask`.
pub fn region_histogram(tokens: &TokenGrid, mask: &Mask, k: usize) -> Result<FeatureVec> {
    if tokens.rows != mask.rows || tokens.cols != mask.cols {
        return Err(TokenArError::invalid(format!(
            "mask {}x{} does not match token grid {}x{}",
            mask.rows, mask.cols, tokens.rows, tokens.cols
        )));
    }
    let mut values = vec![0.0f64; k];
    let mut count = 0.0;
    for row in 0..tokens.rows {
        for col in 0..tokens.cols {
            if mask.at(row, col) {
                values[tokens.at(col, row) as usize] += 1.0;
                count += 1.0;
            }
        }
    }
    if count > 0.0 {
        for v in values.iter_mut() {
            *v /= count;
        }
    }
    Ok(FeatureVec { values })
}

/// Cosine similarity; zero vectors compare as 0.
pub fn similarity(a: &FeatureVec, b: &FeatureVec) -> Result<f64> {
    if a.values.len() != b.values.len() {
        return Err(TokenArError::invalid(format!(
            "feature dimension mismatch: {} vs {}",
            a.values.len(),
            b.values.len()
        )));
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    let na: f64 = a.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    if a.values == b.values {
        // Identical nonzero vectors compare as exactly 1 regardless of
        // rounding in the norm product.
        return Ok(1.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Per-subject similarity between the target foreground under each mask and
/// the matching reference foreground.
pub fn subject_similarities(
    sample: &SceneSample,
    codebook: &Codebook,
    patch: usize,
) -> Result<[f64; 2]> {
    let k = codebook.entries.len();
    let target = quantize(&sample.target, codebook, patch)?;
    let mut sims = [0.0f64; 2];
    for i in 0..2 {
        let ref_tokens = quantize(&sample.ref_images[i], codebook, patch)?;
        let fg = region_histogram(&target, &sample.masks[i], k)?;
        let rf = region_histogram(&ref_tokens, &sample.ref_masks[i], k)?;
        sims[i] = similarity(&fg, &rf)?;
    }
    Ok(sims)
}

/// The dataset admission test: both per-subject similarities must reach δ.
pub fn filter_sample(
    sample: &SceneSample,
    codebook: &Codebook,
    patch: usize,
    delta: f64,
) -> Result<bool> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(TokenArError::invalid(format!(
            "threshold must lie in [0,1], got {delta}"
        )));
    }
    let sims = subject_similarities(sample, codebook, patch)?;
    Ok(sims[0].min(sims[1]) >= delta)
}

/// Draws a random subject pair and relation with disjoint signatures.
pub fn random_scene_inputs(
    rng: &mut rand_chacha::ChaCha8Rng,
    k: usize,
) -> (SubjectSpec, SubjectSpec, u32) {
    use rand::Rng;
    let class_a = rng.gen_range(0..CLASS_NAMES.len() as u32);
    let mut class_b = rng.gen_range(0..CLASS_NAMES.len() as u32);
    if class_b == class_a {
        class_b = (class_b + 1) % CLASS_NAMES.len() as u32;
    }
    let shapes = [Shape::Square, Shape::Disc, Shape::Triangle];
    let len_a = rng.gen_range(2..=4usize);
    let len_b = rng.gen_range(2..=4usize);
    let mut pool: Vec<u32> = (1..k as u32).collect();
    for i in (1..pool.len()).rev() {
        let j = rng.gen_range(0..=i);
        pool.swap(i, j);
    }
    let sig_a = pool[..len_a].to_vec();
    let sig_b = pool[len_a..len_a + len_b].to_vec();
    let a = SubjectSpec {
        class_id: class_a,
        shape: shapes[rng.gen_range(0..3)],
        signature: sig_a,
        pose_seed: rng.gen(),
    };
    let b = SubjectSpec {
        class_id: class_b,
        shape: shapes[rng.gen_range(0..3)],
        signature: sig_b,
        pose_seed: rng.gen(),
    };
    let relation = rng.gen_range(0..RELATION_NAMES.len() as u32);
    (a, b, relation)
}
