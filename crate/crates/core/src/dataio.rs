//! Files: the sample container, point-cloud grids and overlay images.
//!
//! Sample container (little endian):
//!
//! ```text
//! header   "DENT" u32 version u64 count u32 w u32 h f32 world_x f32 world_y u32 flags
//! record   w·h·(f32 x, f32 y, f32 z)  [w·h u8 mask if HAS_MASK]  u32 CRC32(record)
//! ```
//!
//! With the `NOISE` flag each record is instead `w·h` f32 residuals followed
//! by the CRC. Records are read one at a time.

use std::collections::VecDeque;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{io_err, Error, Result};
use crate::grid::{Grid, LabelMask, Point3, ResidualGrid, SurfaceGrid};
use crate::noisebank::{NoiseAugment, NoiseBank, NoiseMap};

pub const DATASET_MAGIC: &[u8; 4] = b"DENT";
pub const DATASET_VERSION: u32 = 1;
pub const FLAG_HAS_MASK: u32 = 1;
pub const FLAG_NOISE: u32 = 2;
const HEADER_LEN: usize = 32;

pub const GRID_TEXT_TAG: &str = "DENTGRID";
pub const GRID_BINARY_MAGIC: &[u8; 4] = b"DGRD";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("bad magic: not a {0} file")]
    BadMagic(&'static str),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch in record {record}")]
    Checksum { record: u64 },
    #[error("file truncated in record {record}")]
    Truncated { record: u64 },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{0}")]
    Format(String),
}

fn data_err(e: DataError) -> Error {
    Error::Data(e)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetHeader {
    pub version: u32,
    pub count: u64,
    pub width: u32,
    pub height: u32,
    pub world_x: f32,
    pub world_y: f32,
    pub flags: u32,
}

impl DatasetHeader {
    pub fn samples(width: usize, height: usize, world_x: f64, world_y: f64, with_masks: bool) -> Self {
        Self {
            version: DATASET_VERSION,
            count: 0,
            width: width as u32,
            height: height as u32,
            world_x: world_x as f32,
            world_y: world_y as f32,
            flags: if with_masks { FLAG_HAS_MASK } else { 0 },
        }
    }

    pub fn noise(width: usize, height: usize) -> Self {
        Self {
            flags: FLAG_NOISE,
            ..Self::samples(width, height, width as f64, height as f64, false)
        }
    }

    pub fn has_mask(&self) -> bool {
        self.flags & FLAG_HAS_MASK != 0
    }

    pub fn is_noise(&self) -> bool {
        self.flags & FLAG_NOISE != 0
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width as usize, self.height as usize)
    }

    fn pitch(&self) -> f64 {
        let (w, h) = self.dims();
        (self.world_x as f64 / w as f64 + self.world_y as f64 / h as f64) / 2.0
    }

    fn cells(&self) -> usize {
        self.width as usize * self.height as usize
    }

    fn record_len(&self) -> usize {
        let cells = self.cells();
        if self.is_noise() {
            cells * 4
        } else {
            cells * 12 + if self.has_mask() { cells } else { 0 }
        }
    }

    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(DATASET_MAGIC);
        b[4..8].copy_from_slice(&self.version.to_le_bytes());
        b[8..16].copy_from_slice(&self.count.to_le_bytes());
        b[16..20].copy_from_slice(&self.width.to_le_bytes());
        b[20..24].copy_from_slice(&self.height.to_le_bytes());
        b[24..28].copy_from_slice(&self.world_x.to_le_bytes());
        b[28..32].copy_from_slice(&self.world_y.to_le_bytes());
        b
    }
}

/// One stored record.
#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Sample {
        surface: SurfaceGrid,
        truth: Option<LabelMask>,
    },
    Noise(ResidualGrid),
}

/// Streaming container writer. Data goes to a sibling temporary file that
/// replaces `path` only on [`DatasetWriter::finish`].
pub struct DatasetWriter {
    header: DatasetHeader,
    out: Option<BufWriter<File>>,
    tmp: PathBuf,
    path: PathBuf,
    buf: Vec<u8>,
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".partial-{}", std::process::id()));
    path.with_file_name(name)
}

impl DatasetWriter {
    pub fn create(path: impl AsRef<Path>, header: DatasetHeader) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if header.width == 0 || header.height == 0 {
            return Err(data_err(DataError::Format("container dims must be positive".into())));
        }
        let tmp = temp_path(&path);
        let file = File::create(&tmp).map_err(io_err(&tmp))?;
        let mut out = BufWriter::new(file);
        let header = DatasetHeader {
            version: DATASET_VERSION,
            count: 0,
            ..header
        };
        let mut bytes = header.encode();
        bytes[HEADER_LEN - 4..].copy_from_slice(&header.flags.to_le_bytes());
        out.write_all(&bytes).map_err(io_err(&tmp))?;
        Ok(Self {
            header,
            out: Some(out),
            tmp,
            path,
            buf: Vec::new(),
        })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    fn check_dims(&self, dims: (usize, usize)) -> Result<()> {
        if dims != self.header.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.header.dims(),
                found: dims,
            });
        }
        Ok(())
    }

    fn emit(&mut self) -> Result<()> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        let out = self.out.as_mut().expect("writer open until finish");
        out.write_all(&self.buf).map_err(io_err(&self.tmp))?;
        self.header.count += 1;
        Ok(())
    }

    pub fn write_sample(&mut self, surface: &SurfaceGrid, truth: Option<&LabelMask>) -> Result<()> {
        if self.header.is_noise() {
            return Err(data_err(DataError::Format("noise container holds residual maps only".into())));
        }
        self.check_dims(surface.dims())?;
        match (truth, self.header.has_mask()) {
            (Some(t), true) => self.check_dims(t.dims())?,
            (None, false) => {}
            _ => return Err(data_err(DataError::Format("mask presence must match the container flags".into()))),
        }
        self.buf.clear();
        for p in surface.iter() {
            for v in [p.x, p.y, p.z] {
                self.buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        if let Some(t) = truth {
            self.buf.extend_from_slice(t.as_slice());
        }
        self.emit()
    }

    pub fn write_noise(&mut self, map: &ResidualGrid) -> Result<()> {
        if !self.header.is_noise() {
            return Err(data_err(DataError::Format("sample container cannot hold noise maps".into())));
        }
        self.check_dims(map.dims())?;
        self.buf.clear();
        for v in map.as_slice() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self.emit()
    }

    /// Patch the record count, flush and atomically move into place.
    pub fn finish(mut self) -> Result<DatasetHeader> {
        let out = self.out.take().expect("writer open until finish");
        let mut file = out.into_inner().map_err(|e| io_err(&self.tmp)(e.into_error()))?;
        file.seek(SeekFrom::Start(8)).map_err(io_err(&self.tmp))?;
        file.write_all(&self.header.count.to_le_bytes()).map_err(io_err(&self.tmp))?;
        file.sync_all().map_err(io_err(&self.tmp))?;
        drop(file);
        fs::rename(&self.tmp, &self.path).map_err(io_err(&self.path))?;
        Ok(self.header)
    }
}

impl Drop for DatasetWriter {
    fn drop(&mut self) {
        if self.out.take().is_some() {
            let _ = fs::remove_file(&self.tmp);
        }
    }
}

/// Streaming container reader; iterate for records.
pub struct DatasetReader<R> {
    header: DatasetHeader,
    input: R,
    next: u64,
    buf: Vec<u8>,
    failed: bool,
}

fn read_full(input: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match input.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

impl DatasetReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(io_err(path))?;
        Self::new(BufReader::new(file))
    }
}

impl<R: Read> DatasetReader<R> {
    pub fn new(mut input: R) -> Result<Self> {
        let mut h = [0u8; HEADER_LEN];
        let n = read_full(&mut input, &mut h).map_err(|e| Error::Io {
            path: PathBuf::from("<container>"),
            source: e,
        })?;
        if n < 4 || &h[0..4] != DATASET_MAGIC {
            return Err(data_err(DataError::BadMagic("sample container")));
        }
        if n < 8 {
            return Err(data_err(DataError::Truncated { record: 0 }));
        }
        let u32_at = |i: usize| u32::from_le_bytes(h[i..i + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != DATASET_VERSION {
            return Err(data_err(DataError::UnsupportedVersion(version)));
        }
        if n < HEADER_LEN {
            return Err(data_err(DataError::Truncated { record: 0 }));
        }
        let header = DatasetHeader {
            version,
            count: u64::from_le_bytes(h[8..16].try_into().unwrap()),
            width: u32_at(16),
            height: u32_at(20),
            world_x: f32::from_le_bytes(h[24..28].try_into().unwrap()),
            world_y: f32::from_le_bytes(h[28..32].try_into().unwrap()),
            flags: u32_at(HEADER_LEN - 4),
        };
        if header.width == 0 || header.height == 0 {
            return Err(data_err(DataError::Format("container dims must be positive".into())));
        }
        if header.flags & !(FLAG_HAS_MASK | FLAG_NOISE) != 0 {
            return Err(data_err(DataError::Format(format!("unknown flags {:#x}", header.flags))));
        }
        Ok(Self {
            buf: vec![0; header.record_len() + 4],
            header,
            input,
            next: 0,
            failed: false,
        })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    fn read_record(&mut self) -> Result<Record> {
        let record = self.next;
        let n = read_full(&mut self.input, &mut self.buf).map_err(|e| Error::Io {
            path: PathBuf::from("<container>"),
            source: e,
        })?;
        if n < self.buf.len() {
            return Err(data_err(DataError::Truncated { record }));
        }
        let (payload, tail) = self.buf.split_at(self.buf.len() - 4);
        if crc32fast::hash(payload) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(data_err(DataError::Checksum { record }));
        }
        let (w, h) = self.header.dims();
        let f = |i: usize| f32::from_le_bytes(payload[4 * i..4 * i + 4].try_into().unwrap());
        if self.header.is_noise() {
            return Ok(Record::Noise(Grid::from_vec(w, h, (0..w * h).map(f).collect())?));
        }
        let points = Grid::from_vec(
            w,
            h,
            (0..w * h)
                .map(|i| Point3::new(f(3 * i) as f64, f(3 * i + 1) as f64, f(3 * i + 2) as f64))
                .collect(),
        )?;
        let truth = if self.header.has_mask() {
            let bytes = payload[12 * w * h..].to_vec();
            Some(LabelMask::new(Grid::from_vec(w, h, bytes)?)?)
        } else {
            None
        };
        Ok(Record::Sample {
            surface: SurfaceGrid::new(points, self.header.pitch()),
            truth,
        })
    }
}

impl<R: Read> Iterator for DatasetReader<R> {
    type Item = Result<Record>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        if self.next == self.header.count {
            // anything after the last record means the count is wrong
            let mut probe = [0u8; 1];
            return match self.input.read(&mut probe) {
                Ok(0) => None,
                Ok(_) => {
                    self.failed = true;
                    Some(Err(data_err(DataError::Format(format!(
                        "data after the {} declared records",
                        self.header.count
                    )))))
                }
                Err(e) => {
                    self.failed = true;
                    Some(Err(Error::Io {
                        path: PathBuf::from("<container>"),
                        source: e,
                    }))
                }
            };
        }
        let r = self.read_record();
        self.next += 1;
        if r.is_err() {
            self.failed = true;
        }
        Some(r)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.header.count - self.next.min(self.header.count)) as usize;
        (0, Some(left + 1))
    }
}

/// Write a whole container at once.
pub fn write_dataset<'a, I>(path: impl AsRef<Path>, header: DatasetHeader, records: I) -> Result<DatasetHeader>
where
    I: IntoIterator<Item = &'a Record>,
{
    let mut w = DatasetWriter::create(path, header)?;
    for r in records {
        match r {
            Record::Sample { surface, truth } => w.write_sample(surface, truth.as_ref())?,
            Record::Noise(map) => w.write_noise(map)?,
        }
    }
    w.finish()
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<DatasetReader<BufReader<File>>> {
    DatasetReader::open(path)
}

/// Store noise maps; all must share the dims of the first.
pub fn write_noise_bank(path: impl AsRef<Path>, maps: &[NoiseMap]) -> Result<DatasetHeader> {
    let first = maps.first().ok_or(Error::Empty("noise bank has no maps"))?;
    let (w, h) = first.dims();
    let mut out = DatasetWriter::create(path, DatasetHeader::noise(w, h))?;
    for m in maps {
        out.write_noise(&m.residuals)?;
    }
    out.finish()
}

pub fn read_noise_bank(path: impl AsRef<Path>) -> Result<NoiseBank> {
    let path = path.as_ref();
    let reader = read_dataset(path)?;
    if !reader.header().is_noise() {
        return Err(data_err(DataError::Format(format!("{} is not a noise bank", path.display()))));
    }
    let mut maps = Vec::new();
    for (i, rec) in reader.enumerate() {
        match rec? {
            Record::Noise(residuals) => maps.push(NoiseMap {
                residuals,
                source: format!("{}#{i}", path.display()),
            }),
            Record::Sample { .. } => unreachable!("noise containers hold only noise records"),
        }
    }
    NoiseBank::new(maps, NoiseAugment::default())
}

/// How to interpret a point-cloud file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CloudFormat {
    /// Binary grid if the file starts with the binary magic, else text grid.
    Auto,
    TextGrid,
    BinaryGrid,
    /// Unordered `x y z` lines, binned onto a lattice with this pitch.
    XyzList { pitch: f64 },
}

/// Unordered points binned onto a lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct Rasterized {
    pub surface: SurfaceGrid,
    /// `true` where at least one input point landed in the cell.
    pub observed: Grid<bool>,
    pub gaps: usize,
}

fn planar_distance(a: &Point3, b: &Point3) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

fn estimate_pitch(points: &Grid<Point3>) -> f64 {
    let (w, h) = points.dims();
    let mut sum = 0.0;
    let mut n = 0usize;
    if w > 1 {
        for c in 1..w {
            sum += planar_distance(points.get(c, 0), points.get(c - 1, 0));
            n += 1;
        }
    } else {
        for r in 1..h {
            sum += planar_distance(points.get(0, r), points.get(0, r - 1));
            n += 1;
        }
    }
    if n == 0 {
        1.0
    } else {
        sum / n as f64
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    data_err(DataError::Parse {
        line,
        message: message.into(),
    })
}

/// Content lines with their 1-based line numbers; comments and blank lines
/// are dropped.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_floats(line_no: usize, line: &str) -> Result<Vec<f64>> {
    line.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            let v: f64 = t.parse().map_err(|_| parse_err(line_no, format!("not a number: {t:?}")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(parse_err(line_no, format!("non-finite coordinate {t}")))
            }
        })
        .collect()
}

/// `DENTGRID <w> <h>` followed by `h` rows of `w` xyz triples.
pub fn parse_text_grid(text: &str) -> Result<SurfaceGrid> {
    let mut lines = content_lines(text);
    let (hl, header) = lines.next().ok_or(Error::Empty("point cloud file"))?;
    let tokens: Vec<&str> = header.split_whitespace().collect();
    let dims = match tokens.as_slice() {
        [tag, w, h] if *tag == GRID_TEXT_TAG => w.parse::<usize>().ok().zip(h.parse::<usize>().ok()),
        _ => None,
    };
    let (w, h) = match dims {
        Some((w, h)) if w > 0 && h > 0 => (w, h),
        _ => return Err(parse_err(hl, format!("expected `{GRID_TEXT_TAG} <width> <height>`"))),
    };
    let mut points = Vec::with_capacity(w * h);
    let mut rows = 0;
    let mut last = hl;
    for (ln, line) in lines {
        last = ln;
        if rows == h {
            return Err(parse_err(ln, format!("more than the declared {h} rows")));
        }
        let v = parse_floats(ln, line)?;
        if v.len() != 3 * w {
            return Err(parse_err(ln, format!("{} values where {} expected", v.len(), 3 * w)));
        }
        points.extend(v.chunks_exact(3).map(|c| Point3::new(c[0], c[1], c[2])));
        rows += 1;
    }
    if rows != h {
        return Err(parse_err(last, format!("{rows} rows where {h} declared")));
    }
    let grid = Grid::from_vec(w, h, points)?;
    let pitch = estimate_pitch(&grid);
    Ok(SurfaceGrid::new(grid, pitch))
}

pub fn format_text_grid(surface: &SurfaceGrid) -> String {
    let (w, h) = surface.dims();
    let mut s = format!("{GRID_TEXT_TAG} {w} {h}\n");
    for r in 0..h {
        let row: Vec<String> = surface
            .points
            .row(r)
            .iter()
            .map(|p| format!("{} {} {}", p.x, p.y, p.z))
            .collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

/// `"DGRD" u32 w u32 h` then `w·h` f32 xyz triples, row major.
pub fn parse_binary_grid(bytes: &[u8]) -> Result<SurfaceGrid> {
    if bytes.len() < 4 || &bytes[..4] != GRID_BINARY_MAGIC {
        return Err(data_err(DataError::BadMagic("binary grid")));
    }
    if bytes.len() < 12 {
        return Err(data_err(DataError::Truncated { record: 0 }));
    }
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if w == 0 || h == 0 {
        return Err(Error::Empty("binary grid"));
    }
    let body = &bytes[12..];
    if body.len() != w * h * 12 {
        return Err(data_err(if body.len() < w * h * 12 {
            DataError::Truncated { record: 0 }
        } else {
            DataError::Format("binary grid has trailing bytes".into())
        }));
    }
    let f = |i: usize| f32::from_le_bytes(body[4 * i..4 * i + 4].try_into().unwrap()) as f64;
    let grid = Grid::from_vec(w, h, (0..w * h).map(|i| Point3::new(f(3 * i), f(3 * i + 1), f(3 * i + 2))).collect())?;
    let bad = crate::grid::validate_finite(&grid);
    if let Some((c, r)) = bad.first() {
        return Err(data_err(DataError::Format(format!("non-finite point at ({c},{r})"))));
    }
    let pitch = estimate_pitch(&grid);
    Ok(SurfaceGrid::new(grid, pitch))
}

pub fn encode_binary_grid(surface: &SurfaceGrid) -> Vec<u8> {
    let (w, h) = surface.dims();
    let mut out = Vec::with_capacity(12 + 12 * w * h);
    out.extend_from_slice(GRID_BINARY_MAGIC);
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    for p in surface.iter() {
        for v in [p.x, p.y, p.z] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn parse_xyz_list(text: &str) -> Result<Vec<Point3>> {
    let mut pts = Vec::new();
    for (ln, line) in content_lines(text) {
        match parse_floats(ln, line)?.as_slice() {
            &[x, y, z] => pts.push(Point3::new(x, y, z)),
            v => return Err(parse_err(ln, format!("{} values where 3 expected", v.len()))),
        }
    }
    if pts.is_empty() {
        return Err(Error::Empty("point list"));
    }
    Ok(pts)
}

/// Bin points onto a lattice of the given pitch anchored at the minimum x and
/// y. Each cell keeps the point nearest its centre; empty cells are flagged and
/// take the z of the nearest observed cell (breadth-first) at their centre.
pub fn rasterize(points: &[Point3], pitch: f64) -> Result<Rasterized> {
    if points.is_empty() {
        return Err(Error::Empty("point list"));
    }
    if !(pitch > 0.0 && pitch.is_finite()) {
        return Err(Error::InvalidConfig(format!("raster pitch must be positive, got {pitch}")));
    }
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    let w = ((x1 - x0) / pitch).round() as usize + 1;
    let h = ((y1 - y0) / pitch).round() as usize + 1;
    if w.saturating_mul(h) > 1 << 28 {
        return Err(Error::InvalidConfig(format!("raster of {w}x{h} cells is too large")));
    }
    let centre = |c: usize, r: usize| (x0 + c as f64 * pitch, y0 + r as f64 * pitch);
    let mut best: Grid<Option<(f64, Point3)>> = Grid::filled(w, h, None);
    for p in points {
        let c = (((p.x - x0) / pitch).round() as usize).min(w - 1);
        let r = (((p.y - y0) / pitch).round() as usize).min(h - 1);
        let (cx, cy) = centre(c, r);
        let d = (p.x - cx).hypot(p.y - cy);
        let slot = best.get_mut(c, r);
        if slot.is_none_or(|(bd, _)| d < bd) {
            *slot = Some((d, *p));
        }
    }
    let observed = best.map(|s| s.is_some());
    let mut z: Grid<Option<f64>> = best.map(|s| s.map(|(_, p)| p.z));
    let mut queue: VecDeque<(usize, usize)> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (c, r)))
        .filter(|&(c, r)| *observed.get(c, r))
        .collect();
    while let Some((c, r)) = queue.pop_front() {
        let v = *z.get(c, r);
        let mut visit = |nc: usize, nr: usize| {
            let slot = z.get_mut(nc, nr);
            if slot.is_none() {
                *slot = v;
                queue.push_back((nc, nr));
            }
        };
        if c > 0 {
            visit(c - 1, r);
        }
        if c + 1 < w {
            visit(c + 1, r);
        }
        if r > 0 {
            visit(c, r - 1);
        }
        if r + 1 < h {
            visit(c, r + 1);
        }
    }
    let grid = Grid::from_fn(w, h, |c, r| match best.get(c, r) {
        Some((_, p)) => *p,
        None => {
            let (x, y) = centre(c, r);
            Point3::new(x, y, z.get(c, r).expect("every cell reachable"))
        }
    });
    let gaps = observed.as_slice().iter().filter(|o| !**o).count();
    Ok(Rasterized {
        surface: SurfaceGrid::new(grid, pitch),
        observed,
        gaps,
    })
}

/// Read a cloud file into an ordered grid.
pub fn read_cloud(path: impl AsRef<Path>, format: CloudFormat) -> Result<SurfaceGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.is_empty() {
        return Err(Error::Empty("point cloud file"));
    }
    let text = || {
        std::str::from_utf8(&bytes).map_err(|_| data_err(DataError::Format(format!("{} is not UTF-8 text", path.display()))))
    };
    match format {
        CloudFormat::BinaryGrid => parse_binary_grid(&bytes),
        CloudFormat::Auto if bytes.starts_with(GRID_BINARY_MAGIC) => parse_binary_grid(&bytes),
        CloudFormat::Auto | CloudFormat::TextGrid => parse_text_grid(text()?),
        CloudFormat::XyzList { pitch } => Ok(rasterize(&parse_xyz_list(text()?)?, pitch)?.surface),
    }
}

/// Write a text grid (`.txt`, `.xyz` or anything else) or, for a `.dgrd`
/// extension, a binary grid. The file appears atomically.
pub fn write_cloud(path: impl AsRef<Path>, surface: &SurfaceGrid) -> Result<()> {
    let path = path.as_ref();
    let bytes = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("dgrd")) {
        encode_binary_grid(surface)
    } else {
        format_text_grid(surface).into_bytes()
    };
    write_atomic(path, &bytes)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_path(path);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub const TRUE_POSITIVE: Rgb<u8> = Rgb([0, 255, 0]);
pub const FALSE_POSITIVE: Rgb<u8> = Rgb([255, 0, 0]);
pub const FALSE_NEGATIVE: Rgb<u8> = Rgb([0, 0, 255]);

/// Colour image of a segmentation. With ground truth: true positives green,
/// false positives red, false negatives blue. Without: predicted cells green.
/// Everything else shows the residual as grey levels.
pub fn overlay_image(background: &ResidualGrid, pred: &LabelMask, truth: Option<&LabelMask>) -> Result<RgbImage> {
    let dims = background.dims();
    for d in std::iter::once(pred.dims()).chain(truth.map(LabelMask::dims)) {
        if d != dims {
            return Err(Error::DimensionMismatch { expected: dims, found: d });
        }
    }
    let (lo, hi) = background
        .as_slice()
        .iter()
        .filter(|v| v.is_finite())
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (w, h) = dims;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (c, r) = (x as usize, y as usize);
        let p = pred.is_set(c, r);
        let t = truth.map(|t| t.is_set(c, r));
        match (p, t) {
            (true, Some(true)) | (true, None) => TRUE_POSITIVE,
            (true, Some(false)) => FALSE_POSITIVE,
            (false, Some(true)) => FALSE_NEGATIVE,
            (false, _) => {
                let v = *background.get(c, r);
                let g = if v.is_finite() { ((v - lo) / span * 255.0).round() as u8 } else { 0 };
                Rgb([g, g, g])
            }
        }
    }))
}

/// Write [`overlay_image`] as a PNG.
pub fn write_overlay(
    path: impl AsRef<Path>,
    background: &ResidualGrid,
    pred: &LabelMask,
    truth: Option<&LabelMask>,
) -> Result<()> {
    let path = path.as_ref();
    let img = overlay_image(background, pred, truth)?;
    let tmp = temp_path(path);
    img.save_with_format(&tmp, image::ImageFormat::Png)?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Write a label mask as text: one row per line, `0`/`1` per cell.
pub fn format_mask(mask: &LabelMask) -> String {
    let (w, h) = mask.dims();
    let mut s = String::with_capacity((w + 1) * h);
    for r in 0..h {
        for c in 0..w {
            s.push(if mask.is_set(c, r) { '1' } else { '0' });
        }
        s.push('\n');
    }
    s
}

pub fn parse_mask(text: &str) -> Result<LabelMask> {
    let mut rows: Vec<Vec<u8>> = Vec::new();
    for (ln, line) in content_lines(text) {
        let row: Vec<u8> = line
            .chars()
            .map(|ch| match ch {
                '0' => Ok(0),
                '1' => Ok(1),
                _ => Err(parse_err(ln, format!("unexpected mask character {ch:?}"))),
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(parse_err(ln, format!("{} cells where {} expected", row.len(), first.len())));
            }
        }
        rows.push(row);
    }
    let h = rows.len();
    if h == 0 {
        return Err(Error::Empty("mask file"));
    }
    let w = rows[0].len();
    LabelMask::new(Grid::from_vec(w, h, rows.concat())?)
}

/// Lines of a buffered reader, for callers that stream large text files.
pub fn lines_of(path: &Path) -> Result<impl Iterator<Item = io::Result<String>>> {
    Ok(BufReader::new(File::open(path).map_err(io_err(path))?).lines())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_sample, SynthConfig};

    fn small_config() -> SynthConfig {
        SynthConfig {
            width: 32,
            height: 16,
            world_x: 96.0,
            world_y: 48.0,
            ..SynthConfig::default()
        }
    }

    fn samples(n: u64) -> Vec<Record> {
        let cfg = small_config();
        (0..n)
            .map(|i| {
                let s = generate_sample(&cfg, 5, i, None).unwrap();
                Record::Sample {
                    surface: s.surface,
                    truth: Some(s.truth),
                }
            })
            .collect()
    }

    fn header() -> DatasetHeader {
        DatasetHeader::samples(32, 16, 96.0, 48.0, true)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.dent");
        let recs = samples(10);
        let h = write_dataset(&path, header(), &recs).unwrap();
        assert_eq!(h.count, 10);
        let back: Vec<Record> = read_dataset(&path).unwrap().collect::<Result<_>>().unwrap();
        assert_eq!(back.len(), 10);
        for (a, b) in recs.iter().zip(&back) {
            let (Record::Sample { surface: sa, truth: ta }, Record::Sample { surface: sb, truth: tb }) = (a, b) else {
                panic!("wrong record kind");
            };
            assert_eq!(ta, tb);
            for (p, q) in sa.iter().zip(sb.iter()) {
                assert_eq!((p.x as f32, p.y as f32, p.z as f32), (q.x as f32, q.y as f32, q.z as f32));
            }
        }
        let path2 = dir.path().join("b.dent");
        write_dataset(&path2, header(), &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn empty_container() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.dent");
        write_dataset(&path, header(), &[]).unwrap();
        assert_eq!(read_dataset(&path).unwrap().count(), 0);
    }

    #[test]
    fn distinct_failures() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.dent");
        write_dataset(&path, header(), &samples(3)).unwrap();
        let good = fs::read(&path).unwrap();
        let rec_len = 32 * 16 * 13 + 4;

        let mut v = good.clone();
        v[HEADER_LEN + rec_len + 100] ^= 0x40;
        let errs: Vec<_> = DatasetReader::new(&v[..]).unwrap().collect();
        assert!(errs[0].is_ok());
        assert!(matches!(errs[1], Err(Error::Data(DataError::Checksum { record: 1 }))));
        assert_eq!(errs.len(), 2);

        let cut = &good[..good.len() - 7];
        let last = DatasetReader::new(cut).unwrap().last().unwrap();
        assert!(matches!(last, Err(Error::Data(DataError::Truncated { record: 2 }))));

        let mut v = good.clone();
        v[0] = b'X';
        assert!(matches!(DatasetReader::new(&v[..]), Err(Error::Data(DataError::BadMagic(_)))));
        let mut v = good.clone();
        v[4] = 9;
        assert!(matches!(DatasetReader::new(&v[..]), Err(Error::Data(DataError::UnsupportedVersion(9)))));
    }

    #[test]
    fn dims_and_flags_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = DatasetWriter::create(dir.path().join("d.dent"), header()).unwrap();
        let Record::Sample { surface, .. } = &samples(1)[0] else { unreachable!() };
        assert!(w.write_sample(surface, None).is_err());
        assert!(w.write_noise(&Grid::filled(32, 16, 0.0)).is_err());
        let wrong = SurfaceGrid::new(Grid::filled(16, 16, Point3::new(0.0, 0.0, 0.0)), 1.0);
        assert!(w.write_sample(&wrong, Some(&LabelMask::zeros(16, 16))).is_err());
    }

    #[test]
    fn abandoned_writer_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.dent");
        drop(DatasetWriter::create(&path, header()).unwrap());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn noise_container() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.dent");
        let maps = vec![
            Record::Noise(Grid::from_fn(8, 4, |c, r| (c + r) as f32 * 0.1)),
            Record::Noise(Grid::filled(8, 4, -0.5)),
        ];
        write_dataset(&path, DatasetHeader::noise(8, 4), &maps).unwrap();
        let r = read_dataset(&path).unwrap();
        assert!(r.header().is_noise());
        let back: Vec<Record> = r.collect::<Result<_>>().unwrap();
        assert_eq!(back, maps);

        let bank = read_noise_bank(&path).unwrap();
        assert_eq!(bank.len(), 2);
        assert!(read_noise_bank(dir.path().join("missing")).is_err());
        let samples_path = dir.path().join("s.dent");
        write_dataset(&samples_path, header(), &samples(1)).unwrap();
        assert!(read_noise_bank(&samples_path).is_err());
    }

    #[test]
    fn text_grid_parses_in_order() {
        let text = "# scan\nDENTGRID 2 2\n0 0 1  1 0 2\n\n0 1 3  1 1 4 # row two\n";
        let g = parse_text_grid(text).unwrap();
        let z: Vec<f64> = g.iter().map(|p| p.z).collect();
        assert_eq!(z, vec![1.0, 2.0, 3.0, 4.0]);
        assert!((g.pitch - 1.0).abs() < 1e-12);
    }

    #[test]
    fn short_row_reports_line() {
        let text = "DENTGRID 2 2\n0 0 1 1 0 2\n0 1 3\n";
        match parse_text_grid(text) {
            Err(Error::Data(DataError::Parse { line, message })) => {
                assert_eq!(line, 3);
                assert!(message.contains("3 values where 6"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_text_grid("DENTGRID 2 2\n0 0 1 1 0 2\n").is_err());
        assert!(matches!(parse_text_grid("# nothing\n"), Err(Error::Empty(_))));
        assert!(parse_text_grid("DENTGRID 1 1\n0 0 nan\n").is_err());
    }

    #[test]
    fn text_and_binary_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let Record::Sample { surface, .. } = &samples(1)[0] else { unreachable!() };
        let t = dir.path().join("s.txt");
        write_cloud(&t, surface).unwrap();
        let back = read_cloud(&t, CloudFormat::Auto).unwrap();
        assert_eq!(back.points, surface.points);
        let b = dir.path().join("s.dgrd");
        write_cloud(&b, surface).unwrap();
        let back = read_cloud(&b, CloudFormat::Auto).unwrap();
        for (p, q) in back.iter().zip(surface.iter()) {
            assert_eq!(p.z, q.z as f32 as f64);
        }
        let bytes = fs::read(&b).unwrap();
        assert!(parse_binary_grid(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn rasterize_binning_oracle() {
        // 3x2 lattice at pitch 2 with a duplicate near (2, 0), a gap at (4, 2)
        let pts = vec![
            Point3::new(0.0, 0.0, 1.0),
            Point3::new(2.4, 0.1, 9.0),
            Point3::new(2.1, 0.0, 2.0),
            Point3::new(4.0, 0.0, 3.0),
            Point3::new(0.0, 2.0, 4.0),
            Point3::new(2.0, 2.2, 5.0),
        ];
        let r = rasterize(&pts, 2.0).unwrap();
        assert_eq!(r.surface.dims(), (3, 2));
        assert_eq!(r.gaps, 1);
        assert!(!*r.observed.get(2, 1));
        assert_eq!(r.surface.points.get(1, 0).z, 2.0);
        let gap = r.surface.points.get(2, 1);
        assert_eq!((gap.x, gap.y), (4.0, 2.0));
        assert!([3.0, 5.0].contains(&gap.z));
        let text = "0 0 1\n2 0 2\n";
        assert_eq!(parse_xyz_list(text).unwrap().len(), 2);
        assert!(parse_xyz_list("0 0\n").is_err());
    }

    #[test]
    fn overlay_colours() {
        let bg = Grid::from_fn(4, 4, |c, _| c as f32);
        let ones = LabelMask::ones(4, 4);
        let zeros = LabelMask::zeros(4, 4);
        let img = overlay_image(&bg, &ones, Some(&ones)).unwrap();
        assert!(img.pixels().all(|p| *p == TRUE_POSITIVE));
        let img = overlay_image(&bg, &ones, Some(&zeros)).unwrap();
        assert!(img.pixels().all(|p| *p == FALSE_POSITIVE));
        let img = overlay_image(&bg, &ones, None).unwrap();
        assert!(img.pixels().all(|p| *p == TRUE_POSITIVE));
        let pred = LabelMask::from_fn(4, 4, |c, r| (c + r) % 2 == 0);
        let truth = LabelMask::from_fn(4, 4, |c, _| c < 2);
        let img = overlay_image(&bg, &pred, Some(&truth)).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let px = *img.get_pixel(c as u32, r as u32);
                let expect = match (pred.is_set(c, r), truth.is_set(c, r)) {
                    (true, true) => TRUE_POSITIVE,
                    (true, false) => FALSE_POSITIVE,
                    (false, true) => FALSE_NEGATIVE,
                    (false, false) => {
                        let g = (c as f32 / 3.0 * 255.0).round() as u8;
                        Rgb([g, g, g])
                    }
                };
                assert_eq!(px, expect, "cell ({c},{r})");
            }
        }
        assert!(overlay_image(&bg, &LabelMask::zeros(3, 4), None).is_err());
    }

    #[test]
    fn overlay_png_written() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("o.png");
        write_overlay(&p, &Grid::filled(5, 3, 0.0), &LabelMask::zeros(5, 3), None).unwrap();
        let img = image::open(&p).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (5, 3));
    }

    #[test]
    fn mask_text_round_trip() {
        let m = LabelMask::from_fn(5, 3, |c, r| (c * r) % 3 == 1);
        assert_eq!(parse_mask(&format_mask(&m)).unwrap(), m);
        assert!(parse_mask("010\n01\n").is_err());
    }
}
