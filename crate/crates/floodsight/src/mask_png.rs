//! Single-channel 8-bit PNG label masks. The georeference, when present,
//! rides along in a `georef` tEXt chunk as JSON.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use anyhow::{bail, Context, Result};
use floodsight_core::mask::{ClassMask, GeoRef};

use crate::atomic::write_atomic;

const GEOREF_KEY: &str = "georef";

pub fn write_mask_png(path: &Path, mask: &ClassMask) -> Result<()> {
    write_atomic(path, |f| {
        let mut enc = png::Encoder::new(BufWriter::new(f), mask.width() as u32, mask.height() as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        if let Some(g) = &mask.georef {
            enc.add_text_chunk(GEOREF_KEY.to_string(), serde_json::to_string(g)?)?;
        }
        let mut w = enc.write_header()?;
        w.write_image_data(mask.data())?;
        w.finish()?;
        Ok(())
    })
}

pub fn read_mask_png(path: &Path) -> Result<ClassMask> {
    let ctx = || format!("reading {}", path.display());
    let f = File::open(path).with_context(ctx)?;
    let mut reader = png::Decoder::new(BufReader::new(f)).read_info().with_context(ctx)?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        bail!("{}: masks must be 8-bit grayscale PNG", path.display());
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let georef = info
        .uncompressed_latin1_text
        .iter()
        .find(|t| t.keyword == GEOREF_KEY)
        .map(|t| serde_json::from_str::<GeoRef>(&t.text))
        .transpose()
        .with_context(|| format!("{}: bad georef chunk", path.display()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().context("image too large")?];
    let frame = reader.next_frame(&mut buf).with_context(ctx)?;
    buf.truncate(frame.buffer_size());
    Ok(ClassMask::new(w, h, buf)?.with_georef(georef))
}
