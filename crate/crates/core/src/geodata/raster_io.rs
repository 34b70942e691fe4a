//! GeoTIFF and PNG raster I/O.
//!
//! GeoTIFF georeferencing is carried in the standard tags: ModelPixelScale and
//! ModelTiepoint for north-up grids, ModelTransformation otherwise, and a
//! GeoKeyDirectory whose GTCitationGeoKey holds the CRS string verbatim so it
//! survives a round trip byte for byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, Write};
use std::path::Path;

use tiff::decoder::{Decoder, DecodingResult, Limits};
use tiff::encoder::{colortype, TiffEncoder};
use tiff::tags::Tag;
use tiff::ColorType;

use super::{BinaryMask, GeoError, GeoRaster, GeoTransform, Grid, LabelRaster, Result};

const KEY_MODEL_TYPE: u16 = 1024;
const KEY_RASTER_TYPE: u16 = 1025;
const KEY_CITATION: u16 = 1026;
const KEY_GEOGRAPHIC_TYPE: u16 = 2048;
const KEY_PROJECTED_TYPE: u16 = 3072;
const RASTER_PIXEL_IS_AREA: u16 = 1;
const MODEL_PROJECTED: u16 = 1;
const MODEL_GEOGRAPHIC: u16 = 2;
const USER_DEFINED: u16 = 32767;

fn io_err(path: &Path, source: std::io::Error) -> GeoError {
    GeoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn tiff_err(path: &Path, e: tiff::TiffError) -> GeoError {
    match e {
        tiff::TiffError::IoError(source) => io_err(path, source),
        other => GeoError::Decode(format!("{}: {other}", path.display())),
    }
}

fn enc_err(path: &Path, e: tiff::TiffError) -> GeoError {
    match e {
        tiff::TiffError::IoError(source) => io_err(path, source),
        other => GeoError::Encode(format!("{}: {other}", path.display())),
    }
}

fn is_tiff(path: &Path) -> Result<bool> {
    let mut f = File::open(path).map_err(|e| io_err(path, e))?;
    let mut magic = [0u8; 4];
    let n = f.read(&mut magic).map_err(|e| io_err(path, e))?;
    Ok(n == 4 && (magic == *b"II*\0" || magic == *b"MM\0*"))
}

/// Load a georeferenced raster. GeoTIFFs keep their transform and CRS; any other
/// image format gets the identity transform and an empty CRS.
pub fn load_raster(path: impl AsRef<Path>) -> Result<GeoRaster> {
    let path = path.as_ref();
    if is_tiff(path)? {
        let (grid, samples, colortype) = read_tiff(path)?;
        let nbands = match colortype {
            ColorType::Gray(8) => 1,
            ColorType::GrayA(8) => 2,
            ColorType::RGB(8) => 3,
            ColorType::RGBA(8) => 4,
            ColorType::Multiband { num_samples, .. } if num_samples > 4 => {
                return Err(GeoError::UnsupportedFormat(format!(
                    "{}: {num_samples} bands (at most 4 supported)",
                    path.display()
                )))
            }
            other => {
                return Err(GeoError::UnsupportedFormat(format!(
                    "{}: colour type {other:?} (8-bit gray/RGB/RGBA expected)",
                    path.display()
                )))
            }
        };
        let DecodingResult::U8(buf) = samples else {
            return Err(GeoError::UnsupportedFormat(format!("{}: non 8-bit samples", path.display())));
        };
        GeoRaster::new(grid, deinterleave(&buf, nbands))
    } else {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(source) => io_err(path, source),
            other => GeoError::Decode(format!("{}: {other}", path.display())),
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let grid = Grid::plain(w, h)?;
        let bands = match img.color().channel_count() {
            1 => vec![img.to_luma8().into_raw()],
            2 => deinterleave(&img.to_luma_alpha8().into_raw(), 2),
            3 => deinterleave(&img.to_rgb8().into_raw(), 3),
            _ => deinterleave(&img.to_rgba8().into_raw(), 4),
        };
        GeoRaster::new(grid, bands)
    }
}

fn deinterleave(buf: &[u8], nbands: usize) -> Vec<Vec<u8>> {
    (0..nbands)
        .map(|b| buf.iter().skip(b).step_by(nbands).copied().collect())
        .collect()
}

fn interleave(bands: &[Vec<u8>]) -> Vec<u8> {
    let n = bands[0].len();
    let mut out = Vec::with_capacity(n * bands.len());
    for i in 0..n {
        for b in bands {
            out.push(b[i]);
        }
    }
    out
}

/// Load an integer label raster (8/16/32-bit single band TIFF, or a gray PNG).
pub fn load_label_raster(path: impl AsRef<Path>) -> Result<LabelRaster> {
    let path = path.as_ref();
    if is_tiff(path)? {
        let (grid, samples, colortype) = read_tiff(path)?;
        if !matches!(colortype, ColorType::Gray(_)) {
            return Err(GeoError::UnsupportedFormat(format!(
                "{}: label rasters must be single band, got {colortype:?}",
                path.display()
            )));
        }
        let data: Vec<u32> = match samples {
            DecodingResult::U8(v) => v.into_iter().map(u32::from).collect(),
            DecodingResult::U16(v) => v.into_iter().map(u32::from).collect(),
            DecodingResult::U32(v) => v,
            _ => {
                return Err(GeoError::UnsupportedFormat(format!(
                    "{}: label samples must be unsigned integers",
                    path.display()
                )))
            }
        };
        LabelRaster::new(grid, data)
    } else {
        let raster = load_raster(path)?;
        if raster.band_count() != 1 {
            return Err(GeoError::UnsupportedFormat(format!(
                "{}: label rasters must be single band",
                path.display()
            )));
        }
        let data = raster.band(0).iter().map(|&v| v as u32).collect();
        LabelRaster::new(raster.grid().clone(), data)
    }
}

/// Load a mask file; every non-zero sample is positive.
pub fn load_mask(path: impl AsRef<Path>) -> Result<(BinaryMask, Grid)> {
    let labels = load_label_raster(path)?;
    let mask = labels.nonzero();
    Ok((mask, labels.grid().clone()))
}

/// Write a label raster as a GeoTIFF using the narrowest unsigned sample
/// width that holds its largest label.
pub fn save_raster(labels: &LabelRaster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let grid = labels.grid();
    let max = labels.max_label();
    let mut enc = create_encoder(path, grid)?;
    if max <= u8::MAX as u32 {
        let data: Vec<u8> = labels.data().iter().map(|&v| v as u8).collect();
        write_image::<colortype::Gray8, _>(&mut enc, grid, &data, path)
    } else if max <= u16::MAX as u32 {
        let data: Vec<u16> = labels.data().iter().map(|&v| v as u16).collect();
        write_image::<colortype::Gray16, _>(&mut enc, grid, &data, path)
    } else {
        write_image::<colortype::Gray32, _>(&mut enc, grid, labels.data(), path)
    }
}

/// Write a binary mask as an 8-bit 0/1 GeoTIFF.
pub fn save_mask(mask: &BinaryMask, transform: &GeoTransform, crs: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let grid = Grid::new(mask.width(), mask.height(), *transform, crs)?;
    let data: Vec<u8> = mask.data().iter().map(|&v| v as u8).collect();
    let mut enc = create_encoder(path, &grid)?;
    write_image::<colortype::Gray8, _>(&mut enc, &grid, &data, path)
}

/// Write a 1, 3 or 4 band raster as a GeoTIFF.
pub fn save_rgb(raster: &GeoRaster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let data = interleave(raster.bands());
    let mut enc = create_encoder(path, raster.grid())?;
    match raster.band_count() {
        1 => write_image::<colortype::Gray8, _>(&mut enc, raster.grid(), &data, path),
        3 => write_image::<colortype::RGB8, _>(&mut enc, raster.grid(), &data, path),
        4 => write_image::<colortype::RGBA8, _>(&mut enc, raster.grid(), &data, path),
        n => Err(GeoError::UnsupportedFormat(format!("cannot encode {n}-band raster"))),
    }
}

fn create_encoder(path: &Path, grid: &Grid) -> Result<TiffEncoder<BufWriter<File>>> {
    // GeoTIFF citations are '|'-terminated ASCII with a u16 length
    if !grid.crs.chars().all(|c| c.is_ascii() && !c.is_ascii_control() && c != '|') || grid.crs.len() >= u16::MAX as usize {
        return Err(GeoError::Invalid(format!(
            "{}: CRS text must be printable ASCII without '|' to be stored in a GeoTIFF",
            path.display()
        )));
    }
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    TiffEncoder::new(BufWriter::new(file)).map_err(|e| enc_err(path, e))
}

fn write_image<C, W>(enc: &mut TiffEncoder<W>, grid: &Grid, data: &[C::Inner], path: &Path) -> Result<()>
where
    C: colortype::ColorType,
    [C::Inner]: tiff::encoder::TiffValue,
    W: Write + Seek,
{
    let mut image = enc
        .new_image::<C>(grid.width as u32, grid.height as u32)
        .map_err(|e| enc_err(path, e))?;
    write_geo_tags(image.encoder(), grid).map_err(|e| enc_err(path, e))?;
    image.write_data(data).map_err(|e| enc_err(path, e))
}

fn write_geo_tags<W: Write + Seek, K: tiff::encoder::TiffKind>(
    dir: &mut tiff::encoder::DirectoryEncoder<'_, W, K>,
    grid: &Grid,
) -> tiff::TiffResult<()> {
    let t = &grid.transform;
    if t.row_rot == 0.0 && t.col_rot == 0.0 && t.pixel_h < 0.0 {
        dir.write_tag(Tag::ModelPixelScaleTag, &[t.pixel_w, -t.pixel_h, 0.0][..])?;
        dir.write_tag(
            Tag::ModelTiepointTag,
            &[0.0, 0.0, 0.0, t.origin_x, t.origin_y, 0.0][..],
        )?;
    } else {
        let m = [
            t.pixel_w, t.row_rot, 0.0, t.origin_x, //
            t.col_rot, t.pixel_h, 0.0, t.origin_y, //
            0.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        ];
        dir.write_tag(Tag::ModelTransformationTag, &m[..])?;
    }

    let mut keys: Vec<[u16; 4]> = vec![[KEY_RASTER_TYPE, 0, 1, RASTER_PIXEL_IS_AREA]];
    let mut ascii = String::new();
    if !grid.crs.is_empty() {
        let code = epsg_code(&grid.crs);
        let geographic = code.is_some_and(|c| (4000..5000).contains(&c));
        keys.push([
            KEY_MODEL_TYPE,
            0,
            1,
            if geographic { MODEL_GEOGRAPHIC } else { MODEL_PROJECTED },
        ]);
        ascii.push_str(&grid.crs);
        ascii.push('|');
        keys.push([KEY_CITATION, Tag::GeoAsciiParamsTag.to_u16(), ascii.len() as u16, 0]);
        let code_key = if geographic { KEY_GEOGRAPHIC_TYPE } else { KEY_PROJECTED_TYPE };
        keys.push([code_key, 0, 1, code.unwrap_or(USER_DEFINED)]);
    }
    keys.sort_by_key(|k| k[0]);
    let mut dir_vals: Vec<u16> = vec![1, 1, 0, keys.len() as u16];
    dir_vals.extend(keys.iter().flatten());
    dir.write_tag(Tag::GeoKeyDirectoryTag, &dir_vals[..])?;
    if !ascii.is_empty() {
        dir.write_tag(Tag::GeoAsciiParamsTag, ascii.as_str())?;
    }
    Ok(())
}

fn epsg_code(crs: &str) -> Option<u16> {
    let rest = crs.trim().strip_prefix("EPSG:").or_else(|| crs.trim().strip_prefix("epsg:"))?;
    rest.parse::<u16>().ok().filter(|&c| c != USER_DEFINED)
}

fn read_tiff(path: &Path) -> Result<(Grid, DecodingResult, ColorType)> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut dec = Decoder::new(BufReader::new(file))
        .map_err(|e| tiff_err(path, e))?
        .with_limits(Limits::unlimited());
    let (w, h) = dec.dimensions().map_err(|e| tiff_err(path, e))?;
    let colortype = dec.colortype().map_err(|e| tiff_err(path, e))?;
    if let ColorType::Multiband { num_samples, .. } = colortype {
        if num_samples > 4 {
            return Err(GeoError::UnsupportedFormat(format!(
                "{}: {num_samples} bands (at most 4 supported)",
                path.display()
            )));
        }
    }
    let transform = read_transform(&mut dec).map_err(|e| tiff_err(path, e))?;
    let crs = read_crs(&mut dec).map_err(|e| tiff_err(path, e))?;
    let samples = dec.read_image().map_err(|e| tiff_err(path, e))?;
    let grid = Grid::new(w as usize, h as usize, transform, crs)?;
    Ok((grid, samples, colortype))
}

fn read_transform<R: Read + Seek>(dec: &mut Decoder<R>) -> tiff::TiffResult<GeoTransform> {
    if let Some(v) = dec.find_tag(Tag::ModelTransformationTag)? {
        let m = v.into_f64_vec()?;
        if m.len() >= 8 {
            return Ok(GeoTransform {
                origin_x: m[3],
                origin_y: m[7],
                pixel_w: m[0],
                pixel_h: m[5],
                row_rot: m[1],
                col_rot: m[4],
            });
        }
    }
    let scale = dec.find_tag(Tag::ModelPixelScaleTag)?.map(|v| v.into_f64_vec()).transpose()?;
    let tie = dec.find_tag(Tag::ModelTiepointTag)?.map(|v| v.into_f64_vec()).transpose()?;
    match (scale, tie) {
        (Some(s), Some(t)) if s.len() >= 2 && t.len() >= 6 => {
            let (i, j, x, y) = (t[0], t[1], t[3], t[4]);
            Ok(GeoTransform {
                origin_x: x - i * s[0],
                origin_y: y + j * s[1],
                pixel_w: s[0],
                pixel_h: -s[1],
                row_rot: 0.0,
                col_rot: 0.0,
            })
        }
        _ => Ok(GeoTransform::identity()),
    }
}

fn read_crs<R: Read + Seek>(dec: &mut Decoder<R>) -> tiff::TiffResult<String> {
    let Some(dir) = dec.find_tag(Tag::GeoKeyDirectoryTag)? else {
        return Ok(String::new());
    };
    let dir = dir.into_u16_vec()?;
    let ascii = match dec.find_tag(Tag::GeoAsciiParamsTag)? {
        Some(v) => v.into_string()?,
        None => String::new(),
    };
    let mut citation = None;
    let mut code = None;
    for key in dir.get(4..).unwrap_or(&[]).chunks_exact(4) {
        match key[0] {
            KEY_CITATION if key[1] == Tag::GeoAsciiParamsTag.to_u16() => {
                let (count, offset) = (key[2] as usize, key[3] as usize);
                let end = (offset + count.saturating_sub(1)).min(ascii.len());
                citation = ascii.get(offset..end).map(str::to_owned);
            }
            KEY_PROJECTED_TYPE | KEY_GEOGRAPHIC_TYPE if key[1] == 0 && key[3] != USER_DEFINED => {
                code = Some(key[3]);
            }
            _ => {}
        }
    }
    Ok(citation
        .or_else(|| code.map(|c| format!("EPSG:{c}")))
        .unwrap_or_default())
}
