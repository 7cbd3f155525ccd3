//! Pixel containers and the media file formats: binary PPM, the `AVID` raw
//! video container, numbered-frame directories, and multiview manifests.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::patchify::CameraView;
use crate::sparse4d::ByteReader;

pub const AVID_MAGIC: [u8; 4] = *b"AVID";
pub const AVID_VERSION: u32 = 1;

/// `height × width × 3` pixels in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width}x3 image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Central crop to the largest size divisible by `p` in both axes.
    pub fn center_crop_to_multiple(&self, p: usize) -> Image {
        let (h, w) = (self.height / p * p, self.width / p * p);
        let (y0, x0) = ((self.height - h) / 2, (self.width - w) / 2);
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            let start = ((y + y0) * self.width + x0) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Image {
            height: h,
            width: w,
            data,
        }
    }
}

/// `frames × height × width × 3` pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Video {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * height * width * 3 {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {frames}x{height}x{width}x3 video",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn frame(&self, t: usize) -> Image {
        let n = self.frame_len();
        Image {
            height: self.height,
            width: self.width,
            data: self.data[t * n..(t + 1) * n].to_vec(),
        }
    }

    pub fn from_frames(frames: &[Image]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::DataError("video has no frames".into()))?;
        let mut data = Vec::with_capacity(frames.len() * first.data.len());
        for f in frames {
            if (f.height, f.width) != (first.height, first.width) {
                return Err(Error::ShapeMismatch("frames differ in size".into()));
            }
            data.extend_from_slice(&f.data);
        }
        Video::new(frames.len(), first.height, first.width, data)
    }

    /// Frames `start..start + len`, zero-filled past the end.
    pub fn window(&self, start: usize, len: usize) -> Video {
        let n = self.frame_len();
        let mut data = vec![0.0; len * n];
        let avail = self.frames.saturating_sub(start).min(len);
        data[..avail * n].copy_from_slice(&self.data[start * n..(start + avail) * n]);
        Video {
            frames: len,
            height: self.height,
            width: self.width,
            data,
        }
    }
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn from_byte(b: u8) -> f32 {
    b as f32 / 255.0
}

pub fn write_ppm<W: Write>(img: &Image, mut sink: W) -> Result<()> {
    let mut buf = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    buf.extend(img.data.iter().map(|&v| to_byte(v)));
    sink.write_all(&buf)?;
    Ok(())
}

pub fn read_ppm<R: Read>(mut source: R) -> Result<Image> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // skip whitespace and comments
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::TruncatedStream("PPM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(Error::DataError(format!(
            "not a binary PPM: {:?}",
            fields[0]
        )));
    }
    let parse = |s: &str, what: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::DataError(format!("bad PPM {what} {s:?}")))
    };
    let width = parse(&fields[1], "width")?;
    let height = parse(&fields[2], "height")?;
    let maxval = parse(&fields[3], "maxval")?;
    if maxval != 255 {
        return Err(Error::DataError(format!("unsupported PPM maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::DataError("empty PPM".into()));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(Error::TruncatedStream(format!(
            "PPM raster needs {need} bytes, {} present",
            bytes.len().saturating_sub(pos)
        )));
    }
    let data = bytes[pos..pos + need]
        .iter()
        .map(|&b| from_byte(b))
        .collect();
    Image::new(height, width, data)
}

pub fn load_ppm(path: &Path) -> Result<Image> {
    let f =
        fs::File::open(path).map_err(|e| Error::DataError(format!("{}: {e}", path.display())))?;
    read_ppm(std::io::BufReader::new(f))
}

pub fn save_ppm(img: &Image, path: &Path) -> Result<()> {
    write_ppm(img, fs::File::create(path)?)
}

pub fn write_avid<W: Write>(vid: &Video, mut sink: W) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + vid.data.len());
    buf.extend_from_slice(&AVID_MAGIC);
    buf.extend_from_slice(&AVID_VERSION.to_le_bytes());
    for d in [vid.frames, vid.height, vid.width] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend(vid.data.iter().map(|&v| to_byte(v)));
    sink.write_all(&buf)?;
    Ok(())
}

pub fn read_avid<R: Read>(mut source: R) -> Result<Video> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let mut r = ByteReader::new(&bytes);
    let magic = r.array::<4>("magic")?;
    if magic != AVID_MAGIC {
        return Err(Error::BadMagic {
            expected: AVID_MAGIC,
            found: magic,
        });
    }
    let version = r.u32("version")?;
    if version != AVID_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let t = r.u32("frames")? as usize;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    if t == 0 || h == 0 || w == 0 {
        return Err(Error::DataError(format!("empty video {t}x{h}x{w}")));
    }
    let raster = r.take(t * h * w * 3, "pixels")?;
    Video::new(t, h, w, raster.iter().map(|&b| from_byte(b)).collect())
}

/// Reads an `AVID` file, or a directory of PPM frames sorted by file name.
pub fn load_video(path: &Path) -> Result<Video> {
    if path.is_dir() {
        let mut frames: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")))
            .collect();
        frames.sort();
        let images = frames
            .iter()
            .map(|p| load_ppm(p))
            .collect::<Result<Vec<_>>>()?;
        Video::from_frames(&images)
    } else {
        let f = fs::File::open(path)
            .map_err(|e| Error::DataError(format!("{}: {e}", path.display())))?;
        read_avid(std::io::BufReader::new(f))
    }
}

pub fn save_avid(vid: &Video, path: &Path) -> Result<()> {
    write_avid(vid, fs::File::create(path)?)
}

fn parse_floats(line: &str, n: usize, what: &str) -> Result<Vec<f64>> {
    let vals = line
        .split_whitespace()
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::DataError(format!("{what}: bad number {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if vals.len() != n {
        return Err(Error::DataError(format!(
            "{what}: expected {n} numbers, found {}",
            vals.len()
        )));
    }
    Ok(vals)
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// Camera intrinsics/extrinsics as 15 decimals:
/// `r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz f cx cy`.
pub fn parse_camera(fields: &str, image: Image) -> Result<CameraView> {
    let v = parse_floats(fields, 15, "camera")?;
    let rotation = [[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]];
    CameraView::new(image, rotation, [v[9], v[10], v[11]], v[12], [v[13], v[14]])
}

/// A multiview manifest: one view per line, `<ppm path>` followed by the 15
/// camera numbers of [`parse_camera`]. Relative paths resolve against the
/// manifest's directory. `#` starts a comment line.
pub fn load_manifest(path: &Path) -> Result<Vec<CameraView>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::DataError(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut views = Vec::new();
    for (n, line) in content_lines(&text) {
        let (img_path, rest) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| Error::DataError(format!("manifest line {n}: missing camera")))?;
        let img = load_ppm(&base.join(img_path))?;
        let cam = parse_camera(rest, img)
            .map_err(|e| Error::DataError(format!("manifest line {n}: {e}")))?;
        views.push(cam);
    }
    if views.is_empty() {
        return Err(Error::DataError("manifest lists no views".into()));
    }
    Ok(views)
}

/// Voxel list: `x y z` integer triples, one per line.
pub fn parse_voxels(text: &str) -> Result<Vec<[u32; 3]>> {
    content_lines(text)
        .map(|(n, line)| {
            let v: Vec<u32> = line
                .split_whitespace()
                .map(|s| s.parse::<u32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::DataError(format!("voxel line {n}: {line:?}")))?;
            match v[..] {
                [x, y, z] => Ok([x, y, z]),
                _ => Err(Error::DataError(format!("voxel line {n}: need 3 integers"))),
            }
        })
        .collect()
}

pub fn load_voxels(path: &Path) -> Result<Vec<[u32; 3]>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::DataError(format!("{}: {e}", path.display())))?;
    parse_voxels(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(h: usize, w: usize) -> Image {
        let data = (0..h * w * 3)
            .map(|i| from_byte((i * 7 % 256) as u8))
            .collect();
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn ppm_round_trip() {
        let img = gradient(5, 7);
        let mut buf = Vec::new();
        write_ppm(&img, &mut buf).unwrap();
        assert!(buf.starts_with(b"P6\n7 5\n255\n"));
        assert_eq!(read_ppm(&buf[..]).unwrap(), img);
    }

    #[test]
    fn ppm_header_comments() {
        let mut buf = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        buf.extend_from_slice(&[255, 0, 51]);
        let img = read_ppm(&buf[..]).unwrap();
        assert_eq!(img.pixel(0, 0), [1.0, 0.0, 0.2]);
        assert!(read_ppm(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn avid_round_trip_and_errors() {
        let frames: Vec<Image> = (0..3).map(|_| gradient(4, 4)).collect();
        let vid = Video::from_frames(&frames).unwrap();
        let mut buf = Vec::new();
        write_avid(&vid, &mut buf).unwrap();
        assert_eq!(read_avid(&buf[..]).unwrap(), vid);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_avid(&bad[..]), Err(Error::BadMagic { .. })));
        assert!(matches!(
            read_avid(&buf[..buf.len() - 1]),
            Err(Error::TruncatedStream(_))
        ));
    }

    #[test]
    fn window_zero_pads() {
        let vid = Video::from_frames(&[gradient(2, 2), gradient(2, 2)]).unwrap();
        let w = vid.window(1, 3);
        assert_eq!(w.frames, 3);
        assert_eq!(w.frame(0), vid.frame(1));
        assert!(w.data[w.frame_len()..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn crop() {
        let img = gradient(17, 35);
        let c = img.center_crop_to_multiple(16);
        assert_eq!((c.height, c.width), (16, 32));
        assert_eq!(c.pixel(0, 0), img.pixel(0, 1));
    }

    #[test]
    fn voxel_list() {
        assert_eq!(
            parse_voxels("# a\n1 2 3\n\n4 5 6\n").unwrap(),
            vec![[1, 2, 3], [4, 5, 6]]
        );
        assert!(parse_voxels("1 2\n").is_err());
    }
}
