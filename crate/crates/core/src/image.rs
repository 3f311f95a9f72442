//! Multi-channel 16-bit field-of-view images and 32-bit patch files.
//!
//! Two image containers are supported: multi-page 16-bit grayscale TIFF and
//! the raw `AFIM` layout (`"AFIM"`, u32 width, u32 height, u32 channel count,
//! channel-name table, little-endian u16 planes). Patches use the `AFPT`
//! variant of the same layout with f32 planes.

use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: &[u8; 4] = b"AFIM";
pub const PATCH_MAGIC: &[u8; 4] = b"AFPT";
/// 405 µm over 1,024 pixels.
pub const DEFAULT_PIXEL_SIZE_UM: f64 = 405.0 / 1024.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Channel {
    Nadh,
    Fad,
    Dodt,
    Apc,
}

impl Channel {
    pub const ALL: [Channel; 4] = [Channel::Nadh, Channel::Fad, Channel::Dodt, Channel::Apc];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Nadh => "NADH",
            Channel::Fad => "FAD",
            Channel::Dodt => "DODT",
            Channel::Apc => "APC",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Channel::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Parameter(format!("unknown channel '{s}' (expected NADH, FAD, DODT or APC)")))
    }
}

/// Parses a comma-separated channel list such as `NADH,FAD,DODT`.
pub fn parse_channel_list(s: &str) -> Result<Vec<Channel>> {
    s.split(',').filter(|t| !t.trim().is_empty()).map(str::parse).collect()
}

/// A single 16-bit intensity plane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u16>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<u16>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Data(format!(
                "plane has {} pixels, expected {width}x{height}",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.data[y * self.width + x]
    }

    /// Translates the plane so that `out(x, y) = self(x - dx, y - dy)`;
    /// uncovered pixels are zero.
    pub fn shifted(&self, dx: i32, dy: i32) -> Plane {
        let mut out = Plane::zeros(self.width, self.height);
        let (w, h) = (self.width as i64, self.height as i64);
        for y in 0..h {
            let sy = y - dy as i64;
            if sy < 0 || sy >= h {
                continue;
            }
            for x in 0..w {
                let sx = x - dx as i64;
                if sx >= 0 && sx < w {
                    out.data[(y * w + x) as usize] = self.data[(sy * w + sx) as usize];
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelImage {
    pub width: usize,
    pub height: usize,
    /// Planes in declared order; names are unique.
    pub channels: Vec<(Channel, Vec<u16>)>,
    pub pixel_size_um: f64,
    pub source_id: String,
}

impl MultiChannelImage {
    pub fn new(width: usize, height: usize, channels: Vec<(Channel, Vec<u16>)>, source_id: impl Into<String>) -> Result<Self> {
        let img = Self {
            width,
            height,
            channels,
            pixel_size_um: DEFAULT_PIXEL_SIZE_UM,
            source_id: source_id.into(),
        };
        img.validate()?;
        Ok(img)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = Vec::new();
        for (c, plane) in &self.channels {
            if plane.len() != self.width * self.height {
                return Err(Error::Data(format!(
                    "{}: channel {c} has {} pixels, expected {}x{}",
                    self.source_id,
                    plane.len(),
                    self.width,
                    self.height
                )));
            }
            if seen.contains(c) {
                return Err(Error::Data(format!("{}: duplicate channel {c}", self.source_id)));
            }
            seen.push(*c);
        }
        for required in [Channel::Nadh, Channel::Fad] {
            if !seen.contains(&required) {
                return Err(Error::Data(format!("{}: missing {required} plane", self.source_id)));
            }
        }
        Ok(())
    }

    pub fn has(&self, c: Channel) -> bool {
        self.channels.iter().any(|(k, _)| *k == c)
    }

    pub fn plane(&self, c: Channel) -> Option<Plane> {
        self.channels
            .iter()
            .find(|(k, _)| *k == c)
            .map(|(_, d)| Plane {
                width: self.width,
                height: self.height,
                data: d.clone(),
            })
    }

    pub fn plane_data(&self, c: Channel) -> Option<&[u16]> {
        self.channels.iter().find(|(k, _)| *k == c).map(|(_, d)| d.as_slice())
    }

    pub fn set_plane(&mut self, c: Channel, data: Vec<u16>) {
        match self.channels.iter_mut().find(|(k, _)| *k == c) {
            Some(slot) => slot.1 = data,
            None => self.channels.push((c, data)),
        }
    }

    pub fn channel_names(&self) -> Vec<Channel> {
        self.channels.iter().map(|(c, _)| *c).collect()
    }
}

pub fn encode_afim(img: &MultiChannelImage) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(IMAGE_MAGIC);
    w.u32(img.width as u32);
    w.u32(img.height as u32);
    w.u32(img.channels.len() as u32);
    for (c, _) in &img.channels {
        w.str(c.name());
    }
    for (_, plane) in &img.channels {
        for &v in plane {
            w.u16(v);
        }
    }
    w.into_inner()
}

pub fn decode_afim(bytes: &[u8], source_id: &str) -> Result<MultiChannelImage> {
    let mut r = Reader::new("AFIM image", bytes);
    if r.take(4)? != IMAGE_MAGIC {
        return Err(r.error("bad magic bytes"));
    }
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    let n = r.u32()? as usize;
    if n > Channel::ALL.len() {
        return Err(r.error(format!("{n} channels declared")));
    }
    let names = (0..n).map(|_| r.str()?.parse()).collect::<Result<Vec<Channel>>>()?;
    let mut channels = Vec::with_capacity(n);
    for c in names {
        channels.push((c, r.u16s(width * height)?));
    }
    r.finish()?;
    MultiChannelImage::new(width, height, channels, source_id)
}

fn tiff_err(path: &Path, e: tiff::TiffError) -> Error {
    match e {
        tiff::TiffError::IoError(io) => Error::io(path, io),
        other => Error::format(path.display().to_string(), other.to_string()),
    }
}

fn read_tiff_pages(path: &Path) -> Result<(usize, usize, Vec<Vec<u16>>)> {
    use tiff::decoder::{Decoder, DecodingResult};
    use tiff::ColorType;

    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder::new(BufReader::new(file)).map_err(|e| tiff_err(path, e))?;
    let mut pages = Vec::new();
    let mut dims = None;
    loop {
        let (w, h) = dec.dimensions().map_err(|e| tiff_err(path, e))?;
        match dec.colortype().map_err(|e| tiff_err(path, e))? {
            ColorType::Gray(16) => {}
            ColorType::Gray(bits) => {
                return Err(Error::format(
                    path.display().to_string(),
                    format!("unsupported bit depth {bits}; 16-bit grayscale required"),
                ))
            }
            other => {
                return Err(Error::format(
                    path.display().to_string(),
                    format!("unsupported color type {other:?}; 16-bit grayscale required"),
                ))
            }
        }
        if *dims.get_or_insert((w, h)) != (w, h) {
            return Err(Error::Data(format!("{}: page {} is {w}x{h}, first page differs", path.display(), pages.len())));
        }
        match dec.read_image().map_err(|e| tiff_err(path, e))? {
            DecodingResult::U16(v) => pages.push(v),
            _ => return Err(Error::format(path.display().to_string(), "unexpected sample format")),
        }
        if !dec.more_images() {
            break;
        }
        dec.next_image().map_err(|e| tiff_err(path, e))?;
    }
    let (w, h) = dims.expect("at least one page");
    Ok((w as usize, h as usize, pages))
}

pub fn write_tiff(img: &MultiChannelImage, path: &Path) -> Result<()> {
    use tiff::encoder::{colortype, TiffEncoder};
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = TiffEncoder::new(BufWriter::new(file)).map_err(|e| tiff_err(path, e))?;
    for (_, plane) in &img.channels {
        enc.write_image::<colortype::Gray16>(img.width as u32, img.height as u32, plane)
            .map_err(|e| tiff_err(path, e))?;
    }
    Ok(())
}

/// Sidecar channel map next to an image: `<file>.channels`, one
/// comma-separated line such as `NADH,FAD,DODT`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".channels");
    PathBuf::from(s)
}

fn source_id(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

/// Loads an image. For TIFF input the page-to-channel mapping comes from
/// `channel_map`, else from the sidecar file, else the default order
/// NADH, FAD, DODT, APC. AFIM files carry their own names; a given map
/// renames their planes in order.
pub fn load_image(path: &Path, channel_map: Option<&[Channel]>) -> Result<MultiChannelImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = source_id(path);
    let sidecar = sidecar_path(path);
    let map: Option<Vec<Channel>> = match channel_map {
        Some(m) => Some(m.to_vec()),
        None if sidecar.exists() => {
            let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
            Some(parse_channel_list(text.trim())?)
        }
        None => None,
    };
    if !bytes.starts_with(IMAGE_MAGIC) {
        let (w, h, pages) = read_tiff_pages(path)?;
        let names = map.clone().unwrap_or_else(|| Channel::ALL[..pages.len().min(4)].to_vec());
        if names.len() != pages.len() {
            return Err(Error::Data(format!(
                "{}: {} pages but channel map names {}",
                path.display(),
                pages.len(),
                names.len()
            )));
        }
        return MultiChannelImage::new(w, h, names.into_iter().zip(pages).collect(), id);
    }
    let mut img = decode_afim(&bytes, &id)?;
    if let Some(m) = map {
        if m.len() != img.channels.len() {
            return Err(Error::Data(format!(
                "{}: {} planes but channel map names {}",
                path.display(),
                img.channels.len(),
                m.len()
            )));
        }
        for (slot, name) in img.channels.iter_mut().zip(m) {
            slot.0 = name;
        }
        img.validate()?;
    }
    Ok(img)
}

pub fn save_afim(img: &MultiChannelImage, path: &Path) -> Result<()> {
    fs::write(path, encode_afim(img)).map_err(|e| Error::io(path, e))
}

/// A `C x H x W` f32 patch with named channels.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchData {
    pub width: usize,
    pub height: usize,
    pub channels: Vec<Channel>,
    pub data: Vec<f32>,
}

impl PatchData {
    pub fn plane(&self, i: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn index_of(&self, c: Channel) -> Option<usize> {
        self.channels.iter().position(|&k| k == c)
    }
}

pub fn encode_patch(p: &PatchData) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(PATCH_MAGIC);
    w.u32(p.width as u32);
    w.u32(p.height as u32);
    w.u32(p.channels.len() as u32);
    for c in &p.channels {
        w.str(c.name());
    }
    for &v in &p.data {
        w.f32(v);
    }
    w.into_inner()
}

pub fn decode_patch(bytes: &[u8]) -> Result<PatchData> {
    let mut r = Reader::new("AFPT patch", bytes);
    if r.take(4)? != PATCH_MAGIC {
        return Err(r.error("bad magic bytes"));
    }
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    let n = r.u32()? as usize;
    if n > Channel::ALL.len() {
        return Err(r.error(format!("{n} channels declared")));
    }
    let channels = (0..n).map(|_| r.str()?.parse()).collect::<Result<Vec<Channel>>>()?;
    let data = r.f32s(n * width * height)?;
    r.finish()?;
    Ok(PatchData {
        width,
        height,
        channels,
        data,
    })
}

pub fn save_patch(p: &PatchData, path: &Path) -> Result<()> {
    fs::write(path, encode_patch(p)).map_err(|e| Error::io(path, e))
}

pub fn load_patch(path: &Path) -> Result<PatchData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_patch(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(channels: &[Channel]) -> MultiChannelImage {
        let (w, h) = (7, 5);
        let planes = channels
            .iter()
            .enumerate()
            .map(|(k, &c)| (c, (0..w * h).map(|i| (i * 977 + k * 13) as u16).collect()))
            .collect();
        MultiChannelImage::new(w, h, planes, "t").unwrap()
    }

    #[test]
    fn afim_round_trip() {
        let img = image(&[Channel::Nadh, Channel::Fad, Channel::Dodt, Channel::Apc]);
        let back = decode_afim(&encode_afim(&img), "t").unwrap();
        assert_eq!(back, img);
        assert!(decode_afim(&encode_afim(&img)[..30], "t").is_err());
    }

    #[test]
    fn missing_fad_rejected() {
        let err = MultiChannelImage::new(2, 2, vec![(Channel::Nadh, vec![0; 4])], "x").unwrap_err();
        assert!(err.to_string().contains("FAD"));
    }

    #[test]
    fn tiff_four_pages_has_apc_three_pages_with_map_does_not() {
        let dir = tempfile::tempdir().unwrap();
        let four = image(&[Channel::Nadh, Channel::Fad, Channel::Dodt, Channel::Apc]);
        let p4 = dir.path().join("four.tif");
        write_tiff(&four, &p4).unwrap();
        let back = load_image(&p4, None).unwrap();
        assert!(back.has(Channel::Apc));
        assert_eq!(back.channels, four.channels);

        let three = image(&[Channel::Nadh, Channel::Fad, Channel::Dodt]);
        let p3 = dir.path().join("three.tif");
        write_tiff(&three, &p3).unwrap();
        fs::write(sidecar_path(&p3), "NADH,FAD,DODT\n").unwrap();
        let back = load_image(&p3, None).unwrap();
        assert!(!back.has(Channel::Apc));
        assert_eq!(back.plane_data(Channel::Dodt), three.plane_data(Channel::Dodt));
    }

    #[test]
    fn eight_bit_tiff_rejected() {
        use tiff::encoder::{colortype, TiffEncoder};
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("eight.tif");
        let mut enc = TiffEncoder::new(fs::File::create(&p).unwrap()).unwrap();
        enc.write_image::<colortype::Gray8>(4, 4, &[0u8; 16]).unwrap();
        drop(enc);
        let err = load_image(&p, None).unwrap_err();
        assert!(err.to_string().contains("bit depth"), "{err}");
    }

    #[test]
    fn patch_round_trip() {
        let p = PatchData {
            width: 3,
            height: 2,
            channels: vec![Channel::Fad, Channel::Dodt],
            data: (0..12).map(|i| i as f32 * 0.5 - 1.0).collect(),
        };
        assert_eq!(decode_patch(&encode_patch(&p)).unwrap(), p);
        assert_eq!(p.plane(1), &[2.0, 2.5, 3.0, 3.5, 4.0, 4.5]);
    }

    #[test]
    fn shift_moves_content() {
        let p = Plane::new(3, 3, (1..=9).collect()).unwrap();
        let s = p.shifted(1, -1);
        assert_eq!(s.data, vec![0, 4, 5, 0, 7, 8, 0, 0, 0]);
    }
}
