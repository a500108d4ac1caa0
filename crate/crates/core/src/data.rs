//! The CFEB embedding container and ground-truth patch masks.
//!
//! Layout (all integers little-endian, no padding):
//!
//! ```text
//! "CFEB" | version u32 | images u32 | n_z u32 | d u32 | grid_h u16 | grid_w u16 | views u8 | label_space u32
//! per image: label u32, then views × n_z × d f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"CFEB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 4 + 4 + 4 + 4 + 4 + 2 + 2 + 1 + 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub images: u32,
    pub n_z: u32,
    pub dim: u32,
    pub grid_h: u16,
    pub grid_w: u16,
    pub views: u8,
    pub label_space: u32,
}

impl Header {
    pub fn record_len(&self) -> u64 {
        4 + self.views as u64 * self.n_z as u64 * self.dim as u64 * 4
    }

    pub fn file_len(&self) -> u64 {
        HEADER_LEN + self.images as u64 * self.record_len()
    }

    fn validate(&self) -> Result<()> {
        let fail = |offset, reason: String| Err(Error::Header { offset, reason });
        if self.n_z == 0 || self.dim == 0 {
            return fail(12, format!("n_z={} d={} must be positive", self.n_z, self.dim));
        }
        if self.grid_h as u32 * self.grid_w as u32 != self.n_z {
            return fail(
                20,
                format!("grid {}x{} does not cover n_z={}", self.grid_h, self.grid_w, self.n_z),
            );
        }
        if !(1..=2).contains(&self.views) {
            return fail(24, format!("views must be 1 or 2, got {}", self.views));
        }
        if self.label_space == 0 {
            return fail(25, "label space is empty".into());
        }
        Ok(())
    }
}

/// One image: its label and one or two `n_z × d` embedding matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub label: u32,
    pub views: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub n_z: usize,
    pub dim: usize,
    pub grid: (usize, usize),
    pub label_space: usize,
    pub images: Vec<Image>,
}

impl Dataset {
    pub fn new(grid: (usize, usize), dim: usize, label_space: usize) -> Self {
        Dataset {
            n_z: grid.0 * grid.1,
            dim,
            grid,
            label_space,
            images: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Views per image; 0 for an empty dataset.
    pub fn views(&self) -> usize {
        self.images.first().map_or(0, |i| i.views.len())
    }

    pub fn push(&mut self, image: Image) -> Result<()> {
        if image.label as usize >= self.label_space {
            return Err(Error::Label {
                label: image.label as usize,
                classes: self.label_space,
            });
        }
        if image.views.is_empty() || image.views.len() > 2 {
            return Err(Error::Data(format!("image has {} views", image.views.len())));
        }
        if !self.images.is_empty() && image.views.len() != self.views() {
            return Err(Error::Data("all images must have the same number of views".into()));
        }
        for v in &image.views {
            if v.dims2() != (self.n_z, self.dim) {
                return Err(Error::dim("image view", v.shape(), &[self.n_z, self.dim]));
            }
        }
        self.images.push(image);
        Ok(())
    }

    pub fn header(&self) -> Result<Header> {
        let narrow = |what: &str, v: usize, max: u64| {
            if v as u64 > max {
                Err(Error::Data(format!("{what} {v} does not fit the file format")))
            } else {
                Ok(v)
            }
        };
        let h = Header {
            images: narrow("image count", self.images.len(), u32::MAX as u64)? as u32,
            n_z: narrow("n_z", self.n_z, u32::MAX as u64)? as u32,
            dim: narrow("d", self.dim, u32::MAX as u64)? as u32,
            grid_h: narrow("grid height", self.grid.0, u16::MAX as u64)? as u16,
            grid_w: narrow("grid width", self.grid.1, u16::MAX as u64)? as u16,
            views: self.views().max(1) as u8,
            label_space: narrow("label space", self.label_space, u32::MAX as u64)? as u32,
        };
        h.validate()?;
        Ok(h)
    }

    /// Images with the label of each, for callers that only need the primary view.
    pub fn labels(&self) -> Vec<usize> {
        self.images.iter().map(|i| i.label as usize).collect()
    }
}

// ---- writing ----

pub fn write_embeddings_to<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    let h = ds.header()?;
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&h.images.to_le_bytes())?;
    w.write_all(&h.n_z.to_le_bytes())?;
    w.write_all(&h.dim.to_le_bytes())?;
    w.write_all(&h.grid_h.to_le_bytes())?;
    w.write_all(&h.grid_w.to_le_bytes())?;
    w.write_all(&[h.views])?;
    w.write_all(&h.label_space.to_le_bytes())?;
    let mut buf = Vec::new();
    for img in &ds.images {
        buf.clear();
        buf.extend_from_slice(&img.label.to_le_bytes());
        for v in &img.views {
            for x in v.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_embeddings(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_embeddings_to(ds, BufWriter::new(File::create(path)?))
}

// ---- reading ----

/// Reads a CFEB stream one image at a time.
pub struct EmbeddingReader<R> {
    inner: R,
    header: Header,
    offset: u64,
    next: u32,
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: &mut u64) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(Error::Truncated {
                    offset: *offset + filled as u64,
                    needed: (buf.len() - filled) as u64,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    *offset += buf.len() as u64;
    Ok(())
}

impl<R: Read> EmbeddingReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut offset = 0;
        let mut magic = [0u8; 4];
        read_exact_at(&mut inner, &mut magic, &mut offset)?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                found: magic,
            });
        }
        let mut rest = [0u8; (HEADER_LEN - 4) as usize];
        read_exact_at(&mut inner, &mut rest, &mut offset)?;
        // `rest` starts at file offset 4; the closures take file offsets.
        let u32_at = |at: usize| u32::from_le_bytes(rest[at - 4..at].try_into().unwrap());
        let u16_at = |at: usize| u16::from_le_bytes(rest[at - 4..at - 2].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::Version {
                offset: 4,
                found: version,
                expected: VERSION,
            });
        }
        let header = Header {
            images: u32_at(8),
            n_z: u32_at(12),
            dim: u32_at(16),
            grid_h: u16_at(20),
            grid_w: u16_at(22),
            views: rest[24 - 4],
            label_space: u32_at(25),
        };
        header.validate()?;
        Ok(EmbeddingReader {
            inner,
            header,
            offset,
            next: 0,
        })
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    /// Byte offset of the next unread record.
    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn next_image(&mut self) -> Result<Option<Image>> {
        if self.next == self.header.images {
            return Ok(None);
        }
        let h = self.header;
        let start = self.offset;
        let mut label = [0u8; 4];
        read_exact_at(&mut self.inner, &mut label, &mut self.offset)?;
        let label = u32::from_le_bytes(label);
        if label >= h.label_space {
            return Err(Error::Header {
                offset: start,
                reason: format!("label {label} outside label space {}", h.label_space),
            });
        }
        let per_view = h.n_z as usize * h.dim as usize;
        let mut bytes = vec![0u8; per_view * 4];
        let mut views = Vec::with_capacity(h.views as usize);
        for _ in 0..h.views {
            read_exact_at(&mut self.inner, &mut bytes, &mut self.offset)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            views.push(Tensor::matrix(h.n_z as usize, h.dim as usize, data)?);
        }
        self.next += 1;
        Ok(Some(Image { label, views }))
    }

    /// Errors if bytes remain after the last record.
    pub fn finish(mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(Error::Header {
                offset: self.offset,
                reason: "trailing bytes after the last image".into(),
            }),
        }
    }
}

impl<R: Read> Iterator for EmbeddingReader<R> {
    type Item = Result<Image>;
    fn next(&mut self) -> Option<Self::Item> {
        self.next_image().transpose()
    }
}

pub fn read_embeddings_from<R: Read>(r: R) -> Result<Dataset> {
    let mut reader = EmbeddingReader::new(r)?;
    let h = *reader.header();
    let mut ds = Dataset::new((h.grid_h as usize, h.grid_w as usize), h.dim as usize, h.label_space as usize);
    ds.images.reserve(h.images as usize);
    while let Some(img) = reader.next_image()? {
        ds.images.push(img);
    }
    reader.finish()?;
    Ok(ds)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Dataset> {
    read_embeddings_from(BufReader::new(File::open(path)?))
}

// ---- masks ----

/// Per-image ground truth: `true` marks an informative patch.
pub type Masks = Vec<Vec<bool>>;

/// One line per image, one `0`/`1` character per patch.
pub fn masks_to_text(masks: &Masks) -> String {
    let mut out = String::new();
    for m in masks {
        out.extend(m.iter().map(|&b| if b { '1' } else { '0' }));
        out.push('\n');
    }
    out
}

pub fn masks_from_text(text: &str, n_z: usize) -> Result<Masks> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let line = line.trim();
            if line.len() != n_z {
                return Err(Error::Data(format!("mask line {} has {} cells, expected {n_z}", i + 1, line.len())));
            }
            line.chars()
                .map(|c| match c {
                    '1' => Ok(true),
                    '0' => Ok(false),
                    _ => Err(Error::Data(format!("mask line {} has invalid character {c:?}", i + 1))),
                })
                .collect()
        })
        .collect()
}
