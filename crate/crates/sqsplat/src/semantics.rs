//! Semantic-prior providers and attention-map plumbing.
//!
//! A provider answers one question: given a view and a (point, box) prompt,
//! what is the 2D attention response? Two implementations ship:
//!
//! - [`OracleProvider`]: derives maps from ground-truth part masks (the
//!   Gaussian-blurred, normalized indicator of the part containing the
//!   prompt point). Lets the whole pipeline run and be tested without any
//!   pretrained segmentation model.
//! - [`FileProvider`]: precomputed maps on disk, one directory per view,
//!   for users who run a segmentation model offline. Missing entries are an
//!   error, never silently substituted.
//!
//! Maps are compared after bilinear downsampling to 32x32 and flattening;
//! pairwise distance is L2.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use thiserror::Error;

use crate::hdbscan::{self, ClusterResult};
use crate::img::{ImageRgb, LabelImage};
use crate::rasterize::PromptBox;

/// Side length of the grid maps are compared at.
pub const CLUSTER_GRID: u32 = 32;

/// Blur radius used by the synthetic oracle, in pixels.
pub const ORACLE_BLUR_SIGMA: f64 = 3.0;

/// Weight of the prompt-locality bump mixed into oracle maps. Promptable
/// segmentation responses concentrate near the query point; this small term
/// reproduces that, giving same-part maps a meaningful (tiny) spread so
/// cluster centroids land at semantic part centers instead of degenerating
/// to index-order ties.
pub const ORACLE_PROMPT_WEIGHT: f64 = 0.08;

#[derive(Debug, Error)]
pub enum SemanticsError {
    #[error("no precomputed attention map for view {view} point ({px:.2}, {py:.2})")]
    MissingPrior { view: u32, px: f64, py: f64 },
    #[error("view {0} is unknown to the provider")]
    UnknownView(u32),
    #[error("attention map file is malformed: {0}")]
    BadMapFile(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Opaque handle identifying one view for a provider.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ImageEmbedding {
    pub view_id: u32,
    pub image_hash: u64,
}

/// Stable FNV-1a over the image bytes; only identity matters here.
pub fn embed_image(view_id: u32, image: &ImageRgb) -> ImageEmbedding {
    let mut hash: u64 = 0xcbf29ce484222325;
    let mut mix = |byte: u8| {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    };
    for b in image.width.to_le_bytes() {
        mix(b);
    }
    for b in image.height.to_le_bytes() {
        mix(b);
    }
    for v in &image.data {
        for b in v.to_le_bytes() {
            mix(b);
        }
    }
    ImageEmbedding {
        view_id,
        image_hash: hash,
    }
}

/// One 2D attention response. The grid is nonnegative and sums to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub width: u32,
    pub height: u32,
    /// Row-major nonnegative weights.
    pub grid: Vec<f32>,
    pub prompt_point: [f64; 2],
    pub prompt_box: PromptBox,
}

impl AttentionMap {
    /// Bilinear downsample to `size` x `size`, flattened for clustering.
    pub fn downsample_flat(&self, size: u32) -> Vec<f64> {
        let mut out = Vec::with_capacity((size * size) as usize);
        let sx = self.width as f64 / size as f64;
        let sy = self.height as f64 / size as f64;
        for y in 0..size {
            for x in 0..size {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
                let x0 = fx.floor() as u32;
                let y0 = fy.floor() as u32;
                let x1 = (x0 + 1).min(self.width - 1);
                let y1 = (y0 + 1).min(self.height - 1);
                let tx = fx - x0 as f64;
                let ty = fy - y0 as f64;
                let g = |xx: u32, yy: u32| self.grid[(yy * self.width + xx) as usize] as f64;
                let v = g(x0, y0) * (1.0 - tx) * (1.0 - ty)
                    + g(x1, y0) * tx * (1.0 - ty)
                    + g(x0, y1) * (1.0 - tx) * ty
                    + g(x1, y1) * tx * ty;
                out.push(v);
            }
        }
        out
    }
}

/// Answers attention-map queries for prompts.
///
/// Implementations must be deterministic for fixed inputs and safe for
/// concurrent read queries.
pub trait SemanticPrior: Send + Sync {
    fn attention_map(
        &self,
        h: &ImageEmbedding,
        point: [f64; 2],
        bbox: &PromptBox,
    ) -> Result<AttentionMap, SemanticsError>;
}

/// Queries one map per prompt point, downsamples, and clusters with HDBSCAN.
pub fn cluster_attention_maps(maps: &[AttentionMap], min_cluster_size: usize) -> ClusterResult {
    assert!(!maps.is_empty(), "need at least one attention map");
    let flat: Vec<Vec<f64>> = maps
        .iter()
        .map(|m| m.downsample_flat(CLUSTER_GRID))
        .collect();
    hdbscan::cluster(&flat, min_cluster_size)
}

// ---------------------------------------------------------------------------
// Synthetic oracle provider
// ---------------------------------------------------------------------------

/// Derives attention maps from ground-truth part masks: the map for a prompt
/// is the Gaussian-blurred (sigma = 3 px), sum-normalized indicator of the
/// part containing the prompt point, blended with a small normalized bump at
/// the prompt itself (weight [`ORACLE_PROMPT_WEIGHT`]). Points on background
/// fall back to the nearest labeled pixel's part (ties to the lower label).
pub struct OracleProvider {
    masks: HashMap<u32, LabelImage>,
    blur_sigma: f64,
    cache: RwLock<HashMap<(u32, u8), Arc<Vec<f32>>>>,
    nearest_cache: RwLock<HashMap<u32, Arc<Vec<u8>>>>,
}

impl OracleProvider {
    pub fn new(masks: HashMap<u32, LabelImage>) -> Self {
        Self {
            masks,
            blur_sigma: ORACLE_BLUR_SIGMA,
            cache: RwLock::new(HashMap::new()),
            nearest_cache: RwLock::new(HashMap::new()),
        }
    }

    /// Part label owning a pixel, falling back to the nearest labeled pixel
    /// (grid distance, ties to the lower label).
    pub fn part_at(mask: &LabelImage, px: f64, py: f64) -> Option<u8> {
        let nearest = nearest_label_map(mask);
        let x = (px.floor() as i64).clamp(0, mask.width as i64 - 1) as u32;
        let y = (py.floor() as i64).clamp(0, mask.height as i64 - 1) as u32;
        match nearest[(y * mask.width + x) as usize] {
            0 => None,
            l => Some(l),
        }
    }

    fn part_at_cached(&self, view: u32, mask: &LabelImage, px: f64, py: f64) -> Option<u8> {
        let x = (px.floor() as i64).clamp(0, mask.width as i64 - 1) as u32;
        let y = (py.floor() as i64).clamp(0, mask.height as i64 - 1) as u32;
        let direct = mask.at(x, y);
        if direct != 0 {
            return Some(direct);
        }
        if let Some(map) = self.nearest_cache.read().unwrap().get(&view) {
            let l = map[(y * mask.width + x) as usize];
            return (l != 0).then_some(l);
        }
        let map = Arc::new(nearest_label_map(mask));
        let l = map[(y * mask.width + x) as usize];
        self.nearest_cache.write().unwrap().insert(view, map);
        (l != 0).then_some(l)
    }

    fn part_map(&self, view: u32, part: u8) -> Result<Arc<Vec<f32>>, SemanticsError> {
        if let Some(hit) = self.cache.read().unwrap().get(&(view, part)) {
            return Ok(hit.clone());
        }
        let mask = self
            .masks
            .get(&view)
            .ok_or(SemanticsError::UnknownView(view))?;
        let w = mask.width as usize;
        let h = mask.height as usize;
        let indicator: Vec<f64> = mask
            .labels
            .iter()
            .map(|&l| if l == part { 1.0 } else { 0.0 })
            .collect();
        let blurred = gaussian_blur(&indicator, w, h, self.blur_sigma);
        let total: f64 = blurred.iter().sum();
        let norm = if total > 0.0 { total } else { 1.0 };
        let grid: Arc<Vec<f32>> = Arc::new(blurred.iter().map(|v| (v / norm) as f32).collect());
        self.cache
            .write()
            .unwrap()
            .insert((view, part), grid.clone());
        Ok(grid)
    }
}

/// Per-pixel nearest nonzero label by multi-source BFS (ties resolve to the
/// lower label through the seed ordering).
fn nearest_label_map(mask: &LabelImage) -> Vec<u8> {
    let w = mask.width as usize;
    let h = mask.height as usize;
    let mut out = vec![0u8; w * h];
    let mut queue = std::collections::VecDeque::new();
    let mut seeds: Vec<(u8, usize)> = mask
        .labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != 0)
        .map(|(i, &l)| (l, i))
        .collect();
    seeds.sort_unstable();
    for (l, i) in seeds {
        if out[i] == 0 {
            out[i] = l;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = (i % w, i / w);
        let label = out[i];
        let mut push = |nx: usize, ny: usize, out: &mut Vec<u8>, queue: &mut std::collections::VecDeque<usize>| {
            let ni = ny * w + nx;
            if out[ni] == 0 {
                out[ni] = label;
                queue.push_back(ni);
            }
        };
        if x > 0 {
            push(x - 1, y, &mut out, &mut queue);
        }
        if x + 1 < w {
            push(x + 1, y, &mut out, &mut queue);
        }
        if y > 0 {
            push(x, y - 1, &mut out, &mut queue);
        }
        if y + 1 < h {
            push(x, y + 1, &mut out, &mut queue);
        }
    }
    out
}

impl SemanticPrior for OracleProvider {
    fn attention_map(
        &self,
        h: &ImageEmbedding,
        point: [f64; 2],
        bbox: &PromptBox,
    ) -> Result<AttentionMap, SemanticsError> {
        let mask = self
            .masks
            .get(&h.view_id)
            .ok_or(SemanticsError::UnknownView(h.view_id))?;
        let part = self
            .part_at_cached(h.view_id, mask, point[0], point[1])
            .unwrap_or(0);
        let part_grid = if part == 0 {
            // A mask with no labeled pixels at all: flat response.
            let n = (mask.width * mask.height) as usize;
            Arc::new(vec![1.0 / n as f32; n])
        } else {
            self.part_map(h.view_id, part)?
        };

        // Blend in the prompt-locality bump (normalized to unit mass).
        let w = mask.width as usize;
        let h_px = mask.height as usize;
        let inv_two_sigma2 = 1.0 / (2.0 * self.blur_sigma * self.blur_sigma);
        let mut bump = vec![0.0f64; w * h_px];
        let mut total = 0.0;
        for (i, b) in bump.iter_mut().enumerate() {
            let x = (i % w) as f64 + 0.5;
            let y = (i / w) as f64 + 0.5;
            let d2 = (x - point[0]).powi(2) + (y - point[1]).powi(2);
            *b = (-d2 * inv_two_sigma2).exp();
            total += *b;
        }
        let norm = if total > 0.0 { total } else { 1.0 };
        let grid = part_grid
            .iter()
            .zip(&bump)
            .map(|(&p, &b)| {
                ((1.0 - ORACLE_PROMPT_WEIGHT) * p as f64 + ORACLE_PROMPT_WEIGHT * b / norm) as f32
            })
            .collect();

        Ok(AttentionMap {
            width: mask.width,
            height: mask.height,
            grid,
            prompt_point: point,
            prompt_box: *bbox,
        })
    }
}

/// Separable Gaussian blur with zero padding.
fn gaussian_blur(data: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp());
    }
    let ksum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= ksum;
    }

    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let xx = x as i64 + ki as i64 - radius;
                if xx >= 0 && xx < w as i64 {
                    acc += k * data[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let yy = y as i64 + ki as i64 - radius;
                if yy >= 0 && yy < h as i64 {
                    acc += k * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// File-backed provider
// ---------------------------------------------------------------------------

const MAP_HEADER_TAG: &str = "AMAP1";

/// Writes one map: a text header line
/// `AMAP1 <Ha> <Wa> <px> <py> <x0> <y0> <x1> <y1>\n`
/// followed by Ha*Wa little-endian f32 values, row-major.
pub fn write_attention_map<W: Write>(map: &AttentionMap, w: &mut W) -> std::io::Result<()> {
    writeln!(
        w,
        "{} {} {} {} {} {} {} {} {}",
        MAP_HEADER_TAG,
        map.height,
        map.width,
        map.prompt_point[0],
        map.prompt_point[1],
        map.prompt_box.x0,
        map.prompt_box.y0,
        map.prompt_box.x1,
        map.prompt_box.y1
    )?;
    for v in &map.grid {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_attention_map<R: Read>(r: &mut R) -> Result<AttentionMap, SemanticsError> {
    let mut reader = BufReader::new(r);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 9 || fields[0] != MAP_HEADER_TAG {
        return Err(SemanticsError::BadMapFile(format!(
            "bad header: {:?}",
            header.trim_end()
        )));
    }
    let parse = |s: &str| -> Result<f64, SemanticsError> {
        s.parse()
            .map_err(|_| SemanticsError::BadMapFile(format!("bad number {:?}", s)))
    };
    let height = parse(fields[1])? as u32;
    let width = parse(fields[2])? as u32;
    let point = [parse(fields[3])?, parse(fields[4])?];
    let bbox = PromptBox {
        x0: parse(fields[5])?,
        y0: parse(fields[6])?,
        x1: parse(fields[7])?,
        y1: parse(fields[8])?,
    };
    let n = (width as usize) * (height as usize);
    let mut bytes = vec![0u8; n * 4];
    reader.read_exact(&mut bytes)?;
    let grid = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(AttentionMap {
        width,
        height,
        grid,
        prompt_point: point,
        prompt_box: bbox,
    })
}

/// Lookup key: prompt coordinates quantized to 1e-3 px. Offline producers
/// must write maps for the exact prompts they were given.
fn quantize_key(point: [f64; 2], bbox: &PromptBox) -> [i64; 6] {
    let q = |v: f64| (v * 1000.0).round() as i64;
    [
        q(point[0]),
        q(point[1]),
        q(bbox.x0),
        q(bbox.y0),
        q(bbox.x1),
        q(bbox.y1),
    ]
}

/// Precomputed attention maps on disk: `<root>/<view_id>/*.amap`.
pub struct FileProvider {
    root: PathBuf,
    index: HashMap<(u32, [i64; 6]), PathBuf>,
}

impl FileProvider {
    /// Scans the directory tree and indexes every map by its header key.
    pub fn open(root: &Path) -> Result<Self, SemanticsError> {
        let mut index = HashMap::new();
        if root.is_dir() {
            for view_entry in std::fs::read_dir(root)? {
                let view_dir = view_entry?.path();
                if !view_dir.is_dir() {
                    continue;
                }
                let Some(view_id) = view_dir
                    .file_name()
                    .and_then(|n| n.to_str())
                    .and_then(|n| n.parse::<u32>().ok())
                else {
                    continue;
                };
                for map_entry in std::fs::read_dir(&view_dir)? {
                    let path = map_entry?.path();
                    if path.extension().and_then(|e| e.to_str()) != Some("amap") {
                        continue;
                    }
                    let mut file = std::fs::File::open(&path)?;
                    let map = read_attention_map(&mut file)?;
                    index.insert(
                        (view_id, quantize_key(map.prompt_point, &map.prompt_box)),
                        path.clone(),
                    );
                }
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            index,
        })
    }

    /// Stores one map under its view directory; the filename encodes the
    /// quantized prompt key.
    pub fn store(root: &Path, view_id: u32, map: &AttentionMap) -> Result<PathBuf, SemanticsError> {
        let dir = root.join(view_id.to_string());
        std::fs::create_dir_all(&dir)?;
        let key = quantize_key(map.prompt_point, &map.prompt_box);
        let name = format!(
            "p{}_{}_b{}_{}_{}_{}.amap",
            key[0], key[1], key[2], key[3], key[4], key[5]
        );
        let path = dir.join(name);
        let mut file = std::fs::File::create(&path)?;
        write_attention_map(map, &mut file)?;
        Ok(path)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

impl SemanticPrior for FileProvider {
    fn attention_map(
        &self,
        h: &ImageEmbedding,
        point: [f64; 2],
        bbox: &PromptBox,
    ) -> Result<AttentionMap, SemanticsError> {
        let key = (h.view_id, quantize_key(point, bbox));
        let path = self.index.get(&key).ok_or(SemanticsError::MissingPrior {
            view: h.view_id,
            px: point[0],
            py: point[1],
        })?;
        let mut file = std::fs::File::open(path)?;
        read_attention_map(&mut file)
    }
}
