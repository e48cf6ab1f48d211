//! Float32 GeoTIFF read/write with the three GeoTIFF tags
//! (ModelPixelScale, ModelTiepoint, GeoKeyDirectory).

use std::fs::File;
use std::io::{BufReader, BufWriter, Seek, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use floodsight_core::crs::Crs;
use floodsight_core::raster::{GeoRaster, GeoTransform, HAND_CHANNEL, RGB_CHANNELS};
use tiff::decoder::{Decoder, DecodingResult, Limits};
use tiff::encoder::colortype::ColorType;
use tiff::encoder::TiffEncoder;
use tiff::tags::{PhotometricInterpretation, SampleFormat, Tag};

use crate::atomic::write_atomic;

const GT_MODEL_TYPE: u16 = 1024;
const GT_RASTER_TYPE: u16 = 1025;
const GEOGRAPHIC_TYPE: u16 = 2048;
const PROJECTED_CS_TYPE: u16 = 3072;

/// `N` interleaved float32 samples per pixel.
struct Bands<const N: usize>;

impl<const N: usize> ColorType for Bands<N> {
    type Inner = f32;
    const TIFF_VALUE: PhotometricInterpretation = PhotometricInterpretation::BlackIsZero;
    const BITS_PER_SAMPLE: &'static [u16] = &[32; N];
    const SAMPLE_FORMAT: &'static [SampleFormat] = &[SampleFormat::IEEEFP; N];

    fn horizontal_predict(_: &[f32], _: &mut Vec<f32>) {
        unreachable!("no predictor is configured")
    }
}

fn geokeys(crs: Crs) -> Vec<u16> {
    let (model, key, code) = match crs {
        Crs::Wgs84 => (2, GEOGRAPHIC_TYPE, 4326u16),
        other => (1, PROJECTED_CS_TYPE, other.epsg() as u16),
    };
    // header, then (key, location, count, value) entries
    vec![1, 1, 0, 3, GT_MODEL_TYPE, 0, 1, model, GT_RASTER_TYPE, 0, 1, 1, key, 0, 1, code]
}

fn encode<W: Write + Seek, const N: usize>(enc: &mut TiffEncoder<W>, r: &GeoRaster, crs: Crs) -> Result<()> {
    let gt = r.geotransform;
    let mut img = enc.new_image::<Bands<N>>(r.width() as u32, r.height() as u32)?;
    let e = img.encoder();
    e.write_tag(Tag::ModelPixelScaleTag, &[gt.pixel_size_x, gt.pixel_size_y.abs(), 0.0][..])?;
    e.write_tag(Tag::ModelTiepointTag, &[0.0, 0.0, 0.0, gt.origin_x, gt.origin_y, 0.0][..])?;
    e.write_tag(Tag::GeoKeyDirectoryTag, &geokeys(crs)[..])?;
    let names = serde_json::to_string(r.channel_names())?;
    e.write_tag(Tag::ImageDescription, names.as_str())?;
    img.write_data(&r.to_interleaved())?;
    Ok(())
}

/// Writes a north-up float32 GeoTIFF of 1 to 4 bands. Channel names travel in
/// the ImageDescription tag as a JSON list.
pub fn write_geotiff(path: &Path, r: &GeoRaster) -> Result<()> {
    let crs = Crs::parse(&r.crs).with_context(|| format!("raster CRS for {}", path.display()))?;
    if r.geotransform.pixel_size_y >= 0.0 {
        bail!("{}: only north-up rasters (negative pixel_size_y) can be written", path.display());
    }
    write_atomic(path, |f| {
        let mut enc = TiffEncoder::new(BufWriter::new(f))?;
        match r.channels() {
            1 => encode::<_, 1>(&mut enc, r, crs),
            2 => encode::<_, 2>(&mut enc, r, crs),
            3 => encode::<_, 3>(&mut enc, r, crs),
            4 => encode::<_, 4>(&mut enc, r, crs),
            c => bail!("cannot write {c}-band rasters"),
        }
    })
}

fn default_names(c: usize) -> Vec<String> {
    match c {
        1 => vec![HAND_CHANNEL.to_string()],
        3 => RGB_CHANNELS.iter().map(|s| s.to_string()).collect(),
        4 => RGB_CHANNELS.iter().chain([&HAND_CHANNEL]).map(|s| s.to_string()).collect(),
        _ => (0..c).map(|i| format!("band{}", i + 1)).collect(),
    }
}

fn crs_from_keys(keys: &[u16]) -> Result<Crs> {
    for k in keys.chunks_exact(4).skip(1) {
        if (k[0] == PROJECTED_CS_TYPE || k[0] == GEOGRAPHIC_TYPE) && k[1] == 0 {
            return Ok(Crs::parse(&format!("EPSG:{}", k[3]))?);
        }
    }
    Err(anyhow!("GeoKeyDirectory has no EPSG code"))
}

/// Reads a north-up GeoTIFF with any sample type into float32 channels.
pub fn read_geotiff(path: &Path) -> Result<GeoRaster> {
    let ctx = || format!("reading {}", path.display());
    let f = File::open(path).with_context(ctx)?;
    let mut dec = Decoder::new(BufReader::new(f)).with_context(ctx)?.with_limits(Limits::unlimited());
    let (w, h) = dec.dimensions().with_context(ctx)?;
    let channels = dec.colortype().with_context(ctx)?.num_samples() as usize;
    let scale = dec.get_tag_f64_vec(Tag::ModelPixelScaleTag).with_context(|| format!("{}: missing ModelPixelScale", path.display()))?;
    let tie = dec.get_tag_f64_vec(Tag::ModelTiepointTag).with_context(|| format!("{}: missing ModelTiepoint", path.display()))?;
    let keys = dec.get_tag_u16_vec(Tag::GeoKeyDirectoryTag).with_context(|| format!("{}: missing GeoKeyDirectory", path.display()))?;
    if scale.len() < 2 || tie.len() < 6 {
        bail!("{}: malformed georeferencing tags", path.display());
    }
    let crs = crs_from_keys(&keys).with_context(ctx)?;
    let names = match dec.get_tag_ascii_string(Tag::ImageDescription) {
        Ok(s) => serde_json::from_str::<Vec<String>>(&s).ok().filter(|n| n.len() == channels),
        Err(_) => None,
    }
    .unwrap_or_else(|| default_names(channels));
    let interleaved: Vec<f32> = match dec.read_image().with_context(ctx)? {
        DecodingResult::F32(v) => v,
        DecodingResult::F64(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::U8(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::I16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U32(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::I32(v) => v.into_iter().map(|x| x as f32).collect(),
        _ => bail!("{}: unsupported sample type", path.display()),
    };
    // tiepoint maps raster (i, j) to model (x, y)
    let gt = GeoTransform::new(tie[3] - tie[0] * scale[0], tie[4] + tie[1] * scale[1], scale[0], -scale[1])?;
    let (w, h) = (w as usize, h as usize);
    Ok(GeoRaster::from_interleaved(w, h, &interleaved, gt, crs.to_string(), names)?)
}
