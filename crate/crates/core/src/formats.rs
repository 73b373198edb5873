//! On-disk interchange: meshes (PLY/OBJ), depth maps (PFM), images (PNG),
//! camera parameters (plain text), and the atomic-write helper every writer
//! goes through. Binary formats are little-endian throughout.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Point3, Vector3};
use thiserror::Error;

use crate::geometry::{Camera, GeometryError, Image};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic, expected {expected}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("unexpected end of data")]
    Truncated,
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Writes a file by streaming into a temporary sibling and renaming it over
/// the destination, so readers never observe a half-written file.
pub fn write_atomic(
    path: &Path,
    write: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>,
) -> io::Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty());
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = match dir {
        Some(d) => d.join(format!(".tmp-{}", name.to_string_lossy())),
        None => Path::new(&format!(".tmp-{}", name.to_string_lossy())).to_path_buf(),
    };
    let result = (|| {
        let mut out = BufWriter::new(File::create(&tmp)?);
        write(&mut out)?;
        out.flush()?;
        Ok(())
    })();
    match result {
        Ok(()) => std::fs::rename(&tmp, path),
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e)
        }
    }
}

/// Forward-only reader over a byte slice for little-endian binary payloads.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.pos + n > self.buf.len() {
            return Err(FormatError::Truncated);
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("length checked")))
    }

    pub fn i32(&mut self) -> Result<i32, FormatError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().expect("length checked")))
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("length checked")))
    }

    pub fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("length checked")))
    }

    pub fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("length checked")))
    }

    pub fn expect_end(&self) -> Result<(), FormatError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(FormatError::TrailingBytes(n)),
        }
    }
}

// ---------------------------------------------------------------------------
// PLY (binary little-endian, float positions, triangular faces)

pub fn save_ply(
    path: &Path,
    vertices: &[Point3<f64>],
    faces: &[[u32; 3]],
) -> Result<(), FormatError> {
    let payload = ply_bytes(vertices, faces);
    write_atomic(path, |f| f.write_all(&payload))?;
    Ok(())
}

pub fn ply_bytes(vertices: &[Point3<f64>], faces: &[[u32; 3]]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(256 + vertices.len() * 12 + faces.len() * 13);
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         element face {}\nproperty list uchar int vertex_indices\nend_header\n",
        vertices.len(),
        faces.len()
    );
    buf.extend_from_slice(header.as_bytes());
    for v in vertices {
        for a in 0..3 {
            buf.extend_from_slice(&(v[a] as f32).to_le_bytes());
        }
    }
    for f in faces {
        buf.push(3u8);
        for &i in f {
            buf.extend_from_slice(&(i as i32).to_le_bytes());
        }
    }
    buf
}

pub fn load_ply(path: &Path) -> Result<(Vec<Point3<f64>>, Vec<[u32; 3]>), FormatError> {
    let bytes = std::fs::read(path)?;
    ply_from_bytes(&bytes)
}

pub fn ply_from_bytes(bytes: &[u8]) -> Result<(Vec<Point3<f64>>, Vec<[u32; 3]>), FormatError> {
    let header_end = find_subslice(bytes, b"end_header\n")
        .ok_or_else(|| FormatError::Parse("missing end_header".into()))?
        + b"end_header\n".len();
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| FormatError::Parse("non-utf8 header".into()))?;

    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(FormatError::BadMagic { expected: "ply" });
    }
    let mut n_vertices: Option<usize> = None;
    let mut n_faces: Option<usize> = None;
    let mut saw_format = false;
    for line in lines {
        let mut words = line.split_whitespace();
        match words.next() {
            Some("format") => {
                if line.trim() != "format binary_little_endian 1.0" {
                    return Err(FormatError::Parse(format!("unsupported format: {line}")));
                }
                saw_format = true;
            }
            Some("element") => {
                let kind = words.next().unwrap_or("");
                let count: usize = words
                    .next()
                    .and_then(|w| w.parse().ok())
                    .ok_or_else(|| FormatError::Parse(format!("bad element line: {line}")))?;
                match kind {
                    "vertex" => n_vertices = Some(count),
                    "face" => n_faces = Some(count),
                    other => {
                        return Err(FormatError::Parse(format!("unsupported element {other}")))
                    }
                }
            }
            Some("property") | Some("comment") | Some("end_header") | None => {}
            Some(other) => {
                return Err(FormatError::Parse(format!("unsupported header entry {other}")))
            }
        }
    }
    if !saw_format {
        return Err(FormatError::Parse("missing format line".into()));
    }
    let n_vertices = n_vertices.ok_or_else(|| FormatError::Parse("missing vertex count".into()))?;
    let n_faces = n_faces.unwrap_or(0);

    let mut r = ByteReader::new(&bytes[header_end..]);
    let mut vertices = Vec::with_capacity(n_vertices);
    for _ in 0..n_vertices {
        let x = r.f32()? as f64;
        let y = r.f32()? as f64;
        let z = r.f32()? as f64;
        vertices.push(Point3::new(x, y, z));
    }
    let mut faces = Vec::with_capacity(n_faces);
    for _ in 0..n_faces {
        let n = r.u8()?;
        if n != 3 {
            return Err(FormatError::Corrupt(format!("non-triangular face of {n} vertices")));
        }
        let mut f = [0u32; 3];
        for slot in &mut f {
            let i = r.i32()?;
            if i < 0 || i as usize >= n_vertices {
                return Err(FormatError::Corrupt(format!("face index {i} out of range")));
            }
            *slot = i as u32;
        }
        faces.push(f);
    }
    r.expect_end()?;
    Ok((vertices, faces))
}

fn find_subslice(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

// ---------------------------------------------------------------------------
// OBJ (text, write-only)

pub fn save_obj(
    path: &Path,
    vertices: &[Point3<f64>],
    faces: &[[u32; 3]],
) -> Result<(), FormatError> {
    write_atomic(path, |f| {
        for v in vertices {
            writeln!(f, "v {} {} {}", v.x, v.y, v.z)?;
        }
        for face in faces {
            writeln!(f, "f {} {} {}", face[0] + 1, face[1] + 1, face[2] + 1)?;
        }
        Ok(())
    })?;
    Ok(())
}

// ---------------------------------------------------------------------------
// PFM (grayscale, rows stored bottom-up, negative scale = little-endian)

/// Saves a single-channel map. `data` is row-major with row 0 at the top;
/// the file stores rows bottom-up per the format's convention.
pub fn save_pfm(path: &Path, width: u32, height: u32, data: &[f32]) -> Result<(), FormatError> {
    assert_eq!(data.len(), (width * height) as usize);
    write_atomic(path, |f| {
        write!(f, "Pf\n{width} {height}\n-1.0\n")?;
        for y in (0..height).rev() {
            let row = &data[(y * width) as usize..((y + 1) * width) as usize];
            for &v in row {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    })?;
    Ok(())
}

/// Loads a single-channel map back into top-down row-major order.
pub fn load_pfm(path: &Path) -> Result<(u32, u32, Vec<f32>), FormatError> {
    let bytes = std::fs::read(path)?;
    // Header: three whitespace-separated tokens, then a single newline
    // before the payload.
    let mut pos = 0usize;
    let mut tokens = Vec::new();
    while tokens.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            break;
        }
        tokens.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| FormatError::Parse("non-utf8 header".into()))?
                .to_string(),
        );
        if tokens.len() == 4 {
            pos += 1; // the single whitespace byte that terminates the header
        }
    }
    if tokens.len() != 4 {
        return Err(FormatError::Truncated);
    }
    if tokens[0] != "Pf" {
        return Err(FormatError::BadMagic { expected: "Pf" });
    }
    let width: u32 =
        tokens[1].parse().map_err(|_| FormatError::Parse("bad width".into()))?;
    let height: u32 =
        tokens[2].parse().map_err(|_| FormatError::Parse("bad height".into()))?;
    let scale: f32 = tokens[3].parse().map_err(|_| FormatError::Parse("bad scale".into()))?;
    if scale >= 0.0 {
        return Err(FormatError::Parse("big-endian maps are not supported".into()));
    }
    let n = (width as usize) * (height as usize);
    let mut r = ByteReader::new(&bytes[pos..]);
    let mut bottom_up = Vec::with_capacity(n);
    for _ in 0..n {
        bottom_up.push(r.f32()?);
    }
    r.expect_end()?;
    let mut data = vec![0.0f32; n];
    for y in 0..height as usize {
        let src = &bottom_up[(height as usize - 1 - y) * width as usize..][..width as usize];
        data[y * width as usize..][..width as usize].copy_from_slice(src);
    }
    Ok((width, height, data))
}

// ---------------------------------------------------------------------------
// PNG (8-bit RGB)

/// Quantizes to 8 bits per channel and saves. Values are clamped to [0, 1].
pub fn save_png_rgb8(path: &Path, image: &Image) -> Result<(), FormatError> {
    assert_eq!(image.channels, 3, "PNG writer expects RGB");
    let mut img = image::RgbImage::new(image.width, image.height);
    for y in 0..image.height {
        for x in 0..image.width {
            let px = image.texel(x, y);
            let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x, y, image::Rgb([q(px[0]), q(px[1]), q(px[2])]));
        }
    }
    // `image` wants a path and writes directly; route through a buffer to
    // keep the atomic-write guarantee.
    let mut encoded = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut encoded), image::ImageFormat::Png)?;
    write_atomic(path, |f| f.write_all(&encoded))?;
    Ok(())
}

pub fn load_png_rgb8(path: &Path) -> Result<Image, FormatError> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = (img.width(), img.height());
    let mut out = Image::new(w, h, 3)?;
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x, y);
            for c in 0..3 {
                out.set(x, y, c, px[c as usize] as f32 / 255.0);
            }
        }
    }
    Ok(out)
}

/// Quantization applied by the PNG writer, exposed so renderers can bake it
/// into in-memory images and get bit-identical values after a round trip.
pub fn quantize_unit(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

// ---------------------------------------------------------------------------
// Camera text files

/// Plain-text camera: three intrinsic rows, a blank line, three rows of the
/// camera-to-world rotation with the camera center appended, then near/far.
pub fn save_camera_txt(path: &Path, cam: &Camera) -> Result<(), FormatError> {
    write_atomic(path, |f| {
        for i in 0..3 {
            writeln!(f, "{} {} {}", cam.k[(i, 0)], cam.k[(i, 1)], cam.k[(i, 2)])?;
        }
        writeln!(f)?;
        for i in 0..3 {
            writeln!(
                f,
                "{} {} {} {}",
                cam.r[(i, 0)],
                cam.r[(i, 1)],
                cam.r[(i, 2)],
                cam.t[i]
            )?;
        }
        writeln!(f, "{} {}", cam.near, cam.far)?;
        Ok(())
    })?;
    Ok(())
}

/// Image dimensions are not part of the text file; they come from the image
/// the camera belongs to.
pub fn load_camera_txt(path: &Path, width: u32, height: u32) -> Result<Camera, FormatError> {
    let text = std::fs::read_to_string(path)?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|w| {
                    w.parse::<f64>()
                        .map_err(|_| FormatError::Parse(format!("bad number {w:?}")))
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    if rows.len() != 7 {
        return Err(FormatError::Parse(format!("expected 7 data rows, got {}", rows.len())));
    }
    for r in &rows[0..3] {
        if r.len() != 3 {
            return Err(FormatError::Parse("intrinsic rows need 3 entries".into()));
        }
    }
    for r in &rows[3..6] {
        if r.len() != 4 {
            return Err(FormatError::Parse("pose rows need 4 entries".into()));
        }
    }
    if rows[6].len() != 2 {
        return Err(FormatError::Parse("depth range row needs 2 entries".into()));
    }
    let k = Matrix3::from_fn(|i, j| rows[i][j]);
    let r = Matrix3::from_fn(|i, j| rows[3 + i][j]);
    let t = Vector3::new(rows[3][3], rows[4][3], rows[5][3]);
    Ok(Camera::new(k, r, t, width, height, rows[6][0], rows[6][1])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.bin");
        write_atomic(&path, |f| f.write_all(b"first")).unwrap();
        write_atomic(&path, |f| f.write_all(b"second")).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"second");
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .filter(|n| n.starts_with(".tmp-"))
            .collect();
        assert!(leftovers.is_empty(), "temp files left: {leftovers:?}");
    }

    #[test]
    fn atomic_write_failure_keeps_previous_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.bin");
        write_atomic(&path, |f| f.write_all(b"good")).unwrap();
        let err = write_atomic(&path, |f| {
            f.write_all(b"partial")?;
            Err(io::Error::other("boom"))
        });
        assert!(err.is_err());
        assert_eq!(std::fs::read(&path).unwrap(), b"good");
    }

    #[test]
    fn byte_reader_reports_truncation_and_trailing_bytes() {
        let mut r = ByteReader::new(&[1, 0, 0, 0, 9]);
        assert_eq!(r.u32().unwrap(), 1);
        assert!(r.expect_end().is_err());
        assert_eq!(r.u8().unwrap(), 9);
        assert!(r.expect_end().is_ok());
        assert!(r.u8().is_err());
    }

    #[test]
    fn ply_golden_bytes_for_one_triangle() {
        let verts =
            vec![Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 1.0, 0.0)];
        let faces = vec![[0u32, 1, 2]];
        let bytes = ply_bytes(&verts, &faces);
        let header = "ply\nformat binary_little_endian 1.0\nelement vertex 3\n\
                      property float x\nproperty float y\nproperty float z\n\
                      element face 1\nproperty list uchar int vertex_indices\nend_header\n";
        assert!(bytes.starts_with(header.as_bytes()));
        let payload = &bytes[header.len()..];
        assert_eq!(payload.len(), 3 * 12 + 13);
        assert_eq!(&payload[12..16], &1.0f32.to_le_bytes());
        assert_eq!(payload[36], 3u8);
        assert_eq!(&payload[37..41], &0i32.to_le_bytes());
    }

    #[test]
    fn ply_round_trips_random_meshes() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dir = tempfile::tempdir().unwrap();
        for case in 0..5 {
            let n = rng.gen_range(3..50);
            let verts: Vec<Point3<f64>> = (0..n)
                .map(|_| {
                    // f32-representable coordinates so the round trip is exact
                    Point3::new(
                        rng.gen_range(-5.0f32..5.0) as f64,
                        rng.gen_range(-5.0f32..5.0) as f64,
                        rng.gen_range(-5.0f32..5.0) as f64,
                    )
                })
                .collect();
            let faces: Vec<[u32; 3]> = (0..rng.gen_range(1..40))
                .map(|_| {
                    let mut f = [0u32; 3];
                    for s in &mut f {
                        *s = rng.gen_range(0..n as u32);
                    }
                    f
                })
                .collect();
            let path = dir.path().join(format!("m{case}.ply"));
            save_ply(&path, &verts, &faces).unwrap();
            let (rv, rf) = load_ply(&path).unwrap();
            assert_eq!(rv, verts);
            assert_eq!(rf, faces);
        }
    }

    #[test]
    fn ply_rejects_malformed_input() {
        assert!(ply_from_bytes(b"not a ply").is_err());
        let verts = vec![Point3::new(0.0, 0.0, 0.0)];
        let bytes = ply_bytes(&verts, &[[0, 0, 0]]);
        assert!(ply_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        // Face index out of range.
        let mut bad = ply_bytes(&verts, &[[0, 0, 0]]);
        let idx = bad.len() - 4;
        bad[idx..].copy_from_slice(&7i32.to_le_bytes());
        assert!(ply_from_bytes(&bad).is_err());
    }

    #[test]
    fn obj_writes_one_based_indices() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tri.obj");
        let verts =
            vec![Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 1.0, 0.5)];
        save_obj(&path, &verts, &[[0, 1, 2]]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "v 0 0 0\nv 1 0 0\nv 0 1 0.5\nf 1 2 3\n");
    }

    #[test]
    fn pfm_round_trips_and_stores_rows_bottom_up() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        // 2x2, top-down: [a b; c d]
        let data = vec![1.0f32, 2.0, 3.0, 4.0];
        save_pfm(&path, 2, 2, &data).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"Pf\n2 2\n-1.0\n";
        assert!(bytes.starts_with(header));
        // First stored row must be the bottom row (3, 4).
        assert_eq!(&bytes[header.len()..header.len() + 4], &3.0f32.to_le_bytes());
        let (w, h, back) = load_pfm(&path).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(back, data);
    }

    #[test]
    fn pfm_round_trips_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let dir = tempfile::tempdir().unwrap();
        let (w, h) = (13, 7);
        let data: Vec<f32> = (0..w * h).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let path = dir.path().join("r.pfm");
        save_pfm(&path, w, h, &data).unwrap();
        let (rw, rh, back) = load_pfm(&path).unwrap();
        assert_eq!((rw, rh), (w, h));
        assert_eq!(back, data);
    }

    #[test]
    fn png_round_trips_quantized_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut img = Image::new(9, 5, 3).unwrap();
        for v in img.data.iter_mut() {
            *v = quantize_unit(rng.gen_range(0.0..1.0));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        save_png_rgb8(&path, &img).unwrap();
        let back = load_png_rgb8(&path).unwrap();
        assert_eq!(back.width, img.width);
        assert_eq!(back.height, img.height);
        assert_eq!(back.data, img.data);
    }

    #[test]
    fn camera_txt_round_trips_exactly() {
        use nalgebra::Vector3;
        let cam = Camera::look_at(
            Vector3::new(2.0, -1.5, 3.0),
            Vector3::new(0.1, 0.2, -0.3),
            Vector3::new(0.0, 1.0, 0.0),
            512.7,
            640,
            480,
            0.25,
            9.75,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cam.txt");
        save_camera_txt(&path, &cam).unwrap();
        let back = load_camera_txt(&path, 640, 480).unwrap();
        assert_eq!(back.k, cam.k);
        assert_eq!(back.r, cam.r);
        assert_eq!(back.t, cam.t);
        assert_eq!(back.near, cam.near);
        assert_eq!(back.far, cam.far);
        assert_eq!((back.width, back.height), (640, 480));
    }

    #[test]
    fn camera_txt_rejects_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "1 0 0\n0 1 0\n0 0 1\n").unwrap();
        assert!(load_camera_txt(&path, 4, 4).is_err());
        std::fs::write(&path, "1 0 zero\n0 1 0\n0 0 1\n\n1 0 0 0\n0 1 0 0\n0 0 1 0\n0.1 5\n")
            .unwrap();
        assert!(load_camera_txt(&path, 4, 4).is_err());
    }
}
