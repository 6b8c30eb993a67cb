//! Pseudo-healthy reconstruction: a tumorous slice is inpainted under a
//! healthy prompt with edge guidance mirrored from the other hemisphere.

use std::io::BufWriter;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use phs_tensor::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Modality, SliceClass, SliceRecord};
use crate::diffusion::{ddim_sample, DenoiserBundle, KnownRegion, Stage};
use crate::edge::{canny_edges, mirror_composite, CannyParams, EdgeMap};
use crate::error::{Error, Result};
use crate::fsutil::{write_atomic, write_json};
use crate::prompt::{render_prompt, CaseKind};

pub const DEFAULT_STEPS: usize = 50;

#[derive(Clone, Debug)]
pub struct ReconstructionRequest<'a> {
    pub slice: &'a SliceRecord,
    pub steps: usize,
    pub seed: u64,
    pub mask_override: Option<Array2<bool>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMask {
    /// The record's dilated tumor mask.
    Dilated,
    Override,
}

/// Everything needed to replay a reconstruction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub slice_id: String,
    pub prompt: String,
    pub template_index: usize,
    pub seed: u64,
    pub steps: usize,
    pub mask_source: InferenceMask,
    pub mask_pixels: usize,
    pub checkpoint_hash: String,
    pub canny: CannyParams,
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub image: Array2<f32>,
    pub mask: Array2<bool>,
    pub edges: EdgeMap,
    pub provenance: Provenance,
}

/// `mask ? generated : input`, per pixel.
pub fn composite(generated: ArrayView2<'_, f32>, input: ArrayView2<'_, f32>, mask: ArrayView2<'_, bool>) -> Result<Array2<f32>> {
    if generated.dim() != input.dim() || mask.dim() != input.dim() {
        return Err(Error::DimensionMismatch {
            what: "composite inputs",
            left: vec![generated.nrows(), generated.ncols(), mask.nrows(), mask.ncols()],
            right: vec![input.nrows(), input.ncols()],
        });
    }
    let mut out = input.to_owned();
    ndarray::Zip::from(&mut out).and(generated).and(mask).for_each(|o, &g, &m| {
        if m {
            *o = g;
        }
    });
    Ok(out)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Samples the masked region of `image` under `prompt` (and `edges` when
/// given) and composites it into the input. The initial noise comes from
/// `seed`.
pub fn inpaint(
    bundle: &DenoiserBundle<f32>,
    image: ArrayView2<'_, f32>,
    mask: ArrayView2<'_, bool>,
    prompt: &str,
    edges: Option<&EdgeMap>,
    steps: usize,
    seed: u64,
) -> Result<Array2<f32>> {
    let edge_views = edges.map(|e| [e.edges.view()]);
    let batch = bundle.make_batch(&[image], &[mask], &[prompt], edge_views.as_ref().map(|e| &e[..]))?;
    let z_init = Tensor::randn(batch.z0.shape(), &mut stream(seed, 1));
    let known = KnownRegion { latent: &batch.z0, mask: &batch.mask };
    let z0 = ddim_sample(&bundle.schedule, z_init, steps, Some(known), |z, t| {
        let g = Graph::inference();
        let x = g.constant(z.clone());
        Ok(bundle.predict_noise(&g, &x, &batch, &[t])?.into_tensor())
    })?;
    let decoded = bundle.decode_latents(&z0)?;
    let generated = Array2::from_shape_vec(image.dim(), decoded.into_data())
        .expect("decoded image has the slice shape")
        .mapv(|v| v.clamp(-1.0, 1.0));
    composite(generated.view(), image, mask)
}

pub fn reconstruct(
    bundle: &DenoiserBundle<f32>,
    checkpoint_hash: &str,
    canny: &CannyParams,
    request: &ReconstructionRequest<'_>,
) -> Result<Reconstruction> {
    if bundle.control.is_none() {
        return Err(Error::StageMismatch { expected: Stage::Stage2.to_string(), found: Stage::Stage1.to_string() });
    }
    if request.steps == 0 {
        return Err(Error::InvalidArgument("at least one sampling step is required".into()));
    }
    let slice = request.slice;
    let (mask, mask_source) = match &request.mask_override {
        Some(m) => (m.clone(), InferenceMask::Override),
        None if slice.slice_class == SliceClass::Tumorous => (slice.inpaint_mask.clone(), InferenceMask::Dilated),
        None => return Err(Error::InvalidArgument(format!("slice {} is not tumorous and no mask was given", slice.id()))),
    };
    if mask.dim() != slice.dim() {
        return Err(Error::DimensionMismatch {
            what: "mask vs slice",
            left: vec![mask.nrows(), mask.ncols()],
            right: vec![slice.dim().0, slice.dim().1],
        });
    }
    let mask_pixels = mask.iter().filter(|&&m| m).count();
    if mask_pixels == 0 {
        return Err(Error::Empty("inference mask".into()));
    }
    let prompt = render_prompt(CaseKind::NonTumorous, Modality::T1ce, slice.age, None, &mut stream(request.seed, 0))?;
    let edges = mirror_composite(&canny_edges(slice.image.view(), canny)?, mask.view())?;
    let image = inpaint(bundle, slice.image.view(), mask.view(), &prompt.text, Some(&edges), request.steps, request.seed)?;
    Ok(Reconstruction {
        image,
        mask,
        edges,
        provenance: Provenance {
            slice_id: slice.id(),
            prompt: prompt.text,
            template_index: prompt.template_index,
            seed: request.seed,
            steps: request.steps,
            mask_source,
            mask_pixels,
            checkpoint_hash: checkpoint_hash.to_string(),
            canny: *canny,
        },
    })
}

fn to_u16(v: f32, lo: f32, hi: f32) -> u16 {
    (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// 16-bit grayscale PNG of `image` mapped from `[lo, hi]`.
pub fn write_png16(path: &Path, image: ArrayView2<'_, f32>, lo: f32, hi: f32) -> Result<()> {
    let (h, w) = image.dim();
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut bytes), w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let data: Vec<u8> = image.iter().flat_map(|&v| to_u16(v, lo, hi).to_be_bytes()).collect();
        let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
        writer.write_image_data(&data).map_err(|e| Error::format(path, e.to_string()))?;
    }
    write_atomic(path, &bytes)
}

/// Reads a 16-bit grayscale PNG back into `[lo, hi]`.
pub fn read_png16(path: &Path, lo: f32, hi: f32) -> Result<Array2<f32>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(std::io::BufReader::new(file)).read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::format(path, "expected 16-bit grayscale"));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let vals = buf[..h * w * 2].chunks_exact(2).map(|c| lo + (hi - lo) * f32::from(u16::from_be_bytes([c[0], c[1]])) / 65535.0).collect();
    Ok(Array2::from_shape_vec((h, w), vals).expect("png frame size"))
}

/// Writes `<id>.png`, `<id>.f32`, `<id>_diff.png`, `<id>_mask.png` and
/// `<id>.json` into `dir`.
pub fn write_reconstruction(dir: &Path, input: &SliceRecord, rec: &Reconstruction) -> Result<()> {
    let id = &rec.provenance.slice_id;
    write_png16(&dir.join(format!("{id}.png")), rec.image.view(), -1.0, 1.0)?;
    crate::dataset::write_image_f32(&dir.join(format!("{id}.f32")), &rec.image)?;
    let diff = (&input.image - &rec.image).mapv(f32::abs);
    write_png16(&dir.join(format!("{id}_diff.png")), diff.view(), 0.0, 2.0)?;
    write_png16(&dir.join(format!("{id}_mask.png")), rec.mask.mapv(|m| if m { 1.0 } else { 0.0 }).view(), 0.0, 1.0)?;
    write_json(&dir.join(format!("{id}.json")), &rec.provenance)
}
