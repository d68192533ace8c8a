use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PVID";
const FORMAT_VERSION: u32 = 1;
pub(crate) const CHANNELS: usize = 3;

/// Raw-frame RGB video. Frames are stored channel-planar (C, H, W per
/// frame), 8 bits per sample — trivially seekable, no codec involved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Video {
    height: usize,
    width: usize,
    /// num_frames * 3 * height * width bytes.
    data: Vec<u8>,
}

impl Video {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Video {
        assert!(height > 0 && width > 0, "video extents must be positive");
        assert_eq!(data.len() % (CHANNELS * height * width), 0, "video data not a whole number of frames");
        Video { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_frames(&self) -> usize {
        self.data.len() / (CHANNELS * self.height * self.width)
    }

    pub fn frame(&self, idx: usize) -> &[u8] {
        let fl = CHANNELS * self.height * self.width;
        &self.data[idx * fl..(idx + 1) * fl]
    }

    pub fn frame_mut(&mut self, idx: usize) -> &mut [u8] {
        let fl = CHANNELS * self.height * self.width;
        &mut self.data[idx * fl..(idx + 1) * fl]
    }

    /// Gather the listed frames into a (3, len, H, W) tensor scaled to [0,1].
    pub fn gather_clip(&self, frame_ids: &[usize]) -> Tensor {
        let (h, w) = (self.height, self.width);
        let plane = h * w;
        let l = frame_ids.len();
        let mut out = Tensor::zeros(&[CHANNELS, l, h, w]);
        for (t, &fi) in frame_ids.iter().enumerate() {
            let frame = self.frame(fi);
            for c in 0..CHANNELS {
                let src = &frame[c * plane..(c + 1) * plane];
                let dst = &mut out.data_mut()[(c * l + t) * plane..][..plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s as f64 / 255.0;
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(24 + self.data.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.num_frames() as u32).to_le_bytes());
        buf.extend_from_slice(&(CHANNELS as u32).to_le_bytes());
        buf.extend_from_slice(&(self.height as u32).to_le_bytes());
        buf.extend_from_slice(&(self.width as u32).to_le_bytes());
        buf.extend_from_slice(&self.data);
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Video> {
        let mut f = fs::File::open(path)
            .map_err(|e| Error::data(format!("cannot open video {}: {e}", path.display())))?;
        let mut header = [0u8; 24];
        f.read_exact(&mut header)
            .map_err(|_| Error::data(format!("{}: truncated video header", path.display())))?;
        if &header[0..4] != MAGIC {
            return Err(Error::data(format!("{}: not a raw-frame video file", path.display())));
        }
        let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap()) as usize;
        if u32_at(4) != FORMAT_VERSION as usize {
            return Err(Error::data(format!("{}: unsupported video format version {}", path.display(), u32_at(4))));
        }
        let (frames, channels, height, width) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20));
        if channels != CHANNELS || height == 0 || width == 0 {
            return Err(Error::data(format!("{}: bad video extents", path.display())));
        }
        let mut data = Vec::new();
        f.read_to_end(&mut data)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        if data.len() != frames * channels * height * width {
            return Err(Error::data(format!(
                "{}: expected {} bytes of frame data, found {}",
                path.display(),
                frames * channels * height * width,
                data.len()
            )));
        }
        Ok(Video { height, width, data })
    }

    /// Read a directory of numbered .png/.jpg frames (sorted by file name)
    /// as a video. All frames must share one resolution.
    pub fn from_image_dir(dir: &Path) -> Result<Video> {
        let mut paths: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::data(format!("cannot read image dir {}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                    Some("png") | Some("jpg") | Some("jpeg")
                )
            })
            .collect();
        if paths.is_empty() {
            return Err(Error::data(format!("{}: no .png/.jpg frames found", dir.display())));
        }
        paths.sort();
        let mut data = Vec::new();
        let mut extents = None;
        for p in &paths {
            let img = image::open(p)
                .map_err(|e| Error::data(format!("{}: {e}", p.display())))?
                .to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            match extents {
                None => extents = Some((h, w)),
                Some(e) if e != (h, w) => {
                    return Err(Error::data(format!(
                        "{}: frame size {w}x{h} differs from first frame",
                        p.display()
                    )))
                }
                _ => {}
            }
            // interleaved RGB -> channel planes
            let plane = h * w;
            let start = data.len();
            data.resize(start + CHANNELS * plane, 0);
            for (i, px) in img.pixels().enumerate() {
                data[start + i] = px.0[0];
                data[start + plane + i] = px.0[1];
                data[start + 2 * plane + i] = px.0[2];
            }
        }
        let (h, w) = extents.unwrap();
        Ok(Video::new(h, w, data))
    }

    pub fn write_frame_as_png(&self, idx: usize, path: &Path) -> Result<()> {
        let (h, w) = (self.height as u32, self.width as u32);
        let plane = self.height * self.width;
        let frame = self.frame(idx);
        let mut interleaved = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            interleaved.push(frame[i]);
            interleaved.push(frame[plane + i]);
            interleaved.push(frame[2 * plane + i]);
        }
        let img = image::RgbImage::from_raw(w, h, interleaved).unwrap();
        img.save(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        Ok(())
    }
}

/// Atomic file write used for checkpoints and reports: write to a sibling
/// temp file, then rename into place.
pub fn write_then_rename(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
