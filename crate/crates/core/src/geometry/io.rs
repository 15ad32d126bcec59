//! Plain-text mesh files.
//!
//! One header line names the columns, in this order:
//! `x[,y[,z]]`, then features `f1..fk`, normals `nx,ny,nz`, `area`, and
//! targets `t1..tk`, each group optional except the coordinates. Each
//! following line is one point. Reals are written with 17 significant
//! digits so a write/read cycle reproduces every `f64` exactly. Every line,
//! the last included, ends with a newline; a missing final newline is
//! reported as truncation.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::MeshBatch;

/// A real with 17 significant digits.
pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// Column groups found in a header.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub coords: usize,
    pub features: usize,
    pub normals: bool,
    pub area: bool,
    pub targets: usize,
}

impl Layout {
    pub fn of(mesh: &MeshBatch) -> Self {
        Self {
            coords: mesh.coords.cols(),
            features: mesh.features.cols(),
            normals: mesh.normals.is_some(),
            area: mesh.areas.is_some(),
            targets: mesh.targets.as_ref().map_or(0, |t| t.cols()),
        }
    }

    pub fn width(&self) -> usize {
        self.coords + self.features + 3 * self.normals as usize + self.area as usize + self.targets
    }

    pub fn header(&self) -> String {
        let mut cols: Vec<String> = ["x", "y", "z"][..self.coords].iter().map(|s| s.to_string()).collect();
        cols.extend((1..=self.features).map(|i| format!("f{i}")));
        if self.normals {
            cols.extend(["nx", "ny", "nz"].map(String::from));
        }
        if self.area {
            cols.push("area".into());
        }
        cols.extend((1..=self.targets).map(|i| format!("t{i}")));
        cols.join(",")
    }

    fn parse(line: &str) -> std::result::Result<Self, String> {
        let names: Vec<&str> = line.split(',').map(str::trim).collect();
        let mut k = 0;
        let mut take_seq = |expect: &dyn Fn(usize) -> String, max: usize| {
            let mut n = 0;
            while n < max && k < names.len() && names[k] == expect(n) {
                n += 1;
                k += 1;
            }
            n
        };
        let coords = take_seq(&|i| ["x", "y", "z"][i].to_string(), 3);
        let features = take_seq(&|i| format!("f{}", i + 1), usize::MAX);
        let normals = take_seq(&|i| ["nx", "ny", "nz"][i].to_string(), 3);
        let area = take_seq(&|_| "area".to_string(), 1) == 1;
        let targets = take_seq(&|i| format!("t{}", i + 1), usize::MAX);
        if coords == 0 {
            return Err("header must start with coordinate column `x`".into());
        }
        if normals != 0 && normals != 3 {
            return Err("normals need all of `nx,ny,nz`".into());
        }
        if k != names.len() {
            return Err(format!("unexpected column `{}`", names[k]));
        }
        Ok(Self {
            coords,
            features,
            normals: normals == 3,
            area,
            targets,
        })
    }
}

pub fn write_mesh<W: Write>(out: &mut W, mesh: &MeshBatch) -> Result<()> {
    mesh.validate()?;
    let layout = Layout::of(mesh);
    writeln!(out, "{}", layout.header())?;
    let mut fields = Vec::with_capacity(layout.width());
    for i in 0..mesh.len() {
        fields.clear();
        fields.extend(mesh.coords.row(i).iter().map(|&v| format_real(v)));
        fields.extend(mesh.features.row(i).iter().map(|&v| format_real(v)));
        if let Some(n) = &mesh.normals {
            fields.extend(n.row(i).iter().map(|&v| format_real(v)));
        }
        if let Some(a) = &mesh.areas {
            fields.push(format_real(a[i]));
        }
        if let Some(t) = &mesh.targets {
            fields.extend(t.row(i).iter().map(|&v| format_real(v)));
        }
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

pub fn write_mesh_file(path: impl AsRef<Path>, mesh: &MeshBatch) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_mesh(&mut w, mesh)?;
    w.flush()?;
    Ok(())
}

/// Sequential reader yielding index-ordered chunks.
pub struct MeshReader<R> {
    input: R,
    layout: Layout,
    line: usize,
    offset: u64,
    rows: usize,
    buf: String,
}

impl<R: BufRead> MeshReader<R> {
    pub fn new(mut input: R) -> Result<Self> {
        let mut buf = String::new();
        let n = input.read_line(&mut buf)?;
        let fail = |msg: String| Error::Parse { line: 1, offset: 0, msg };
        if n == 0 {
            return Err(fail("empty file, expected a header".into()));
        }
        if !buf.ends_with('\n') {
            return Err(fail("truncated header".into()));
        }
        let layout = Layout::parse(buf.trim_end_matches(['\n', '\r'])).map_err(fail)?;
        Ok(Self {
            input,
            layout,
            line: 1,
            offset: n as u64,
            rows: 0,
            buf,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Data rows consumed so far.
    pub fn rows_read(&self) -> usize {
        self.rows
    }

    fn read_row(&mut self, values: &mut Vec<f64>) -> Result<bool> {
        self.buf.clear();
        let n = self.input.read_line(&mut self.buf)?;
        if n == 0 {
            return Ok(false);
        }
        self.line += 1;
        let (line, start) = (self.line, self.offset);
        self.offset += n as u64;
        let fail = |offset: u64, msg: String| Error::Parse { line, offset, msg };
        if !self.buf.ends_with('\n') {
            return Err(fail(start, "truncated row (no trailing newline)".into()));
        }
        let text = self.buf.trim_end_matches(['\n', '\r']);
        let mut col_offset = start;
        let mut count = 0;
        for field in text.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| fail(col_offset, format!("cannot parse `{field}` as a real")))?;
            values.push(v);
            count += 1;
            col_offset += field.len() as u64 + 1;
        }
        if count != self.layout.width() {
            return Err(fail(
                start,
                format!("expected {} fields, found {count}", self.layout.width()),
            ));
        }
        self.rows += 1;
        Ok(true)
    }

    /// Up to `max_rows` further points, or `None` at end of input.
    pub fn next_chunk(&mut self, max_rows: usize) -> Result<Option<MeshBatch>> {
        if max_rows == 0 {
            return Err(Error::invalid("chunk size must be at least 1"));
        }
        let mut values = Vec::new();
        let mut n = 0;
        while n < max_rows && self.read_row(&mut values)? {
            n += 1;
        }
        if n == 0 {
            return Ok(None);
        }
        self.assemble(n, &values).map(Some)
    }

    /// All remaining points; a header-only file gives an empty batch.
    pub fn read_rest(&mut self) -> Result<MeshBatch> {
        let mut values = Vec::new();
        let mut n = 0;
        while self.read_row(&mut values)? {
            n += 1;
        }
        self.assemble(n, &values)
    }

    fn assemble(&self, n: usize, values: &[f64]) -> Result<MeshBatch> {
        let l = &self.layout;
        let w = l.width();
        let block = |start: usize, width: usize| Matrix::from_fn(n, width, |i, j| values[i * w + start + j]);
        let mut at = 0;
        let mut next = |width: usize| {
            let m = block(at, width);
            at += width;
            m
        };
        let coords = next(l.coords);
        let features = next(l.features);
        let normals = l.normals.then(|| next(3));
        let areas = l.area.then(|| next(1).into_data());
        let targets = (l.targets > 0).then(|| next(l.targets));
        let mesh = MeshBatch {
            coords,
            features,
            normals,
            areas,
            targets,
            indices: None,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn chunks(self, size: usize) -> MeshChunks<R> {
        MeshChunks {
            reader: self,
            size,
            failed: false,
        }
    }
}

pub struct MeshChunks<R> {
    reader: MeshReader<R>,
    size: usize,
    failed: bool,
}

impl<R: BufRead> Iterator for MeshChunks<R> {
    type Item = Result<MeshBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let out = self.reader.next_chunk(self.size).transpose();
        self.failed = matches!(out, Some(Err(_)));
        out
    }
}

pub fn open_mesh(path: impl AsRef<Path>) -> Result<MeshReader<BufReader<File>>> {
    MeshReader::new(BufReader::new(File::open(path)?))
}

pub fn read_mesh_file(path: impl AsRef<Path>) -> Result<MeshBatch> {
    open_mesh(path)?.read_rest()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sphere::{gen_sphere_mesh, manufactured_field};
    use crate::linalg::Rng;

    fn random_mesh(n: usize) -> MeshBatch {
        let mut rng = Rng::seed(3);
        let mut m = gen_sphere_mesh(n, &mut rng).unwrap();
        m.features = rng.normal_matrix(n, 2);
        m.areas = Some((0..n).map(|_| rng.uniform(0.1, 1.0)).collect());
        m.targets = Some(manufactured_field(&m.coords).unwrap().hstack_with(&rng.normal_matrix(n, 1)));
        m
    }

    trait Hstack {
        fn hstack_with(self, other: &Matrix) -> Matrix;
    }

    impl Hstack for Matrix {
        fn hstack_with(self, other: &Matrix) -> Matrix {
            Matrix::hstack(&[self, other.clone()]).unwrap()
        }
    }

    fn to_bytes(m: &MeshBatch) -> Vec<u8> {
        let mut out = Vec::new();
        write_mesh(&mut out, m).unwrap();
        out
    }

    #[test]
    fn header_layout() {
        let m = random_mesh(10);
        let text = String::from_utf8(to_bytes(&m)).unwrap();
        assert!(text.starts_with("x,y,z,f1,f2,nx,ny,nz,area,t1,t2\n"));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = random_mesh(100);
        let back = MeshReader::new(&to_bytes(&m)[..]).unwrap().read_rest().unwrap();
        let bits = |x: &Matrix| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.coords), bits(&m.coords));
        assert_eq!(back, m);
    }

    #[test]
    fn chunked_read_matches_whole() {
        let m = random_mesh(100);
        let bytes = to_bytes(&m);
        let whole = MeshReader::new(&bytes[..]).unwrap().read_rest().unwrap();
        let parts: Vec<MeshBatch> = MeshReader::new(&bytes[..])
            .unwrap()
            .chunks(7)
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(parts.len(), 15);
        assert_eq!(parts[14].len(), 2);
        assert_eq!(MeshBatch::concat(&parts).unwrap(), whole);
    }

    #[test]
    fn truncated_file_names_offset() {
        let bytes = to_bytes(&random_mesh(20));
        let cut = bytes.len() - 10;
        let err = MeshReader::new(&bytes[..cut]).unwrap().read_rest().unwrap_err();
        let last_line_start = bytes[..cut].iter().rposition(|&b| b == b'\n').unwrap() + 1;
        match err {
            Error::Parse { line, offset, .. } => {
                assert_eq!(line, 21);
                assert_eq!(offset, last_line_start as u64);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn malformed_rows_and_headers() {
        assert!(MeshReader::new(&b"x,y,q\n"[..]).is_err());
        assert!(MeshReader::new(&b"x,y,z,nx\n"[..]).is_err());
        assert!(MeshReader::new(&b""[..]).is_err());
        let err = MeshReader::new(&b"x,y\n1,2\n1,abc\n"[..]).unwrap().read_rest().unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, offset: 10, .. }), "{err}");
    }

    #[test]
    fn header_only_is_empty_mesh() {
        let m = MeshReader::new(&b"x,y,z\n"[..]).unwrap().read_rest().unwrap();
        assert!(m.is_empty());
        assert_eq!(m.coords.cols(), 3);
    }
}
