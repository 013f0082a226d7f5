//! On-disk formats: PFM float maps, 16-bit PGM instance maps and the JSON
//! scene description that ties them to cameras and fitted primitives.
//!
//! PFM stores 32-bit floats, so maps are narrowed to `f32` on write; a map
//! whose values are already `f32`-representable round-trips exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, RigidTransform, Vec3, View};
use crate::maps::{DepthMap, Grid2, IdMap, NormalMap};
use crate::merge::PlaneInstance;
use crate::primitive::{PrimitiveGrid, SelectedPrimitive};

pub const SCENE_VERSION: u32 = 1;

/// Largest tolerated deviation of a pose quaternion from unit norm; smaller
/// deviations are normalized away on read.
pub const QUATERNION_NORM_TOLERANCE: f64 = 1e-6;

/// Header fields of a PNM-style file, with the offset of the first payload byte.
struct Header {
    /// `(offset, token)` pairs, magic first.
    fields: Vec<(usize, String)>,
    payload: usize,
}

/// Reads the magic token plus `count` whitespace-separated fields, skipping
/// `#` comments, and consumes the single whitespace byte that ends the header.
fn read_header(bytes: &[u8], count: usize) -> Result<Header> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(count + 1);
    while fields.len() <= count {
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
            return Err(Error::parse(pos, "header ends early"));
        }
        let token = std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::parse(start, "header is not ASCII"))?;
        fields.push((start, token.to_string()));
    }
    if pos >= bytes.len() {
        return Err(Error::parse(pos, "missing whitespace after the header"));
    }
    Ok(Header { fields, payload: pos + 1 })
}

fn parse_field<T: std::str::FromStr>(field: &(usize, String), what: &str) -> Result<T> {
    field.1.parse().map_err(|_| Error::parse(field.0, format!("bad {what} {:?}", field.1)))
}

fn check_payload(header: &Header, len: usize, expected: usize) -> Result<()> {
    let actual = len - header.payload;
    if actual != expected {
        return Err(Error::parse(
            header.payload,
            format!("payload has {actual} bytes, expected {expected}"),
        ));
    }
    Ok(())
}

/// Decoded PFM: row-major, top row first, `channels` floats per pixel.
struct Pfm {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

fn encode_pfm(width: usize, height: usize, channels: usize, data: &[f32]) -> Vec<u8> {
    let magic = if channels == 1 { "Pf" } else { "PF" };
    let mut out = format!("{magic}\n{width} {height}\n-1.0\n").into_bytes();
    out.reserve(data.len() * 4);
    let row = width * channels;
    for r in (0..height).rev() {
        for v in &data[r * row..(r + 1) * row] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_pfm(bytes: &[u8]) -> Result<Pfm> {
    let header = read_header(bytes, 3)?;
    let channels = match header.fields[0].1.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::parse(0, format!("unknown PFM magic {other:?}"))),
    };
    let width: usize = parse_field(&header.fields[1], "width")?;
    let height: usize = parse_field(&header.fields[2], "height")?;
    let scale: f64 = parse_field(&header.fields[3], "scale")?;
    if width == 0 || height == 0 {
        return Err(Error::parse(header.fields[1].0, "image dimensions must be positive"));
    }
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::parse(header.fields[3].0, "scale must be finite and non-zero"));
    }
    let row = width * channels;
    check_payload(&header, bytes.len(), row * height * 4)?;
    let little = scale < 0.0;
    let mut data = vec![0f32; row * height];
    for (i, chunk) in bytes[header.payload..].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (r, c) = (i / row, i % row);
        data[(height - 1 - r) * row + c] = v;
    }
    Ok(Pfm { width, height, channels, data })
}

fn narrow(v: f64) -> Result<f32> {
    let f = v as f32;
    if !f.is_finite() {
        return Err(Error::invalid(format!("map value {v} is not representable as a finite f32")));
    }
    Ok(f)
}

pub fn encode_depth(map: &DepthMap) -> Result<Vec<u8>> {
    let data = map.as_slice().iter().map(|v| narrow(*v)).collect::<Result<Vec<_>>>()?;
    Ok(encode_pfm(map.width(), map.height(), 1, &data))
}

pub fn decode_depth(bytes: &[u8]) -> Result<DepthMap> {
    let pfm = decode_pfm(bytes)?;
    if pfm.channels != 1 {
        return Err(Error::parse(0, "expected a single-channel Pf depth map"));
    }
    Grid2::from_vec(pfm.width, pfm.height, pfm.data.into_iter().map(f64::from).collect())
}

pub fn encode_normal(map: &NormalMap) -> Result<Vec<u8>> {
    let mut data = Vec::with_capacity(map.len() * 3);
    for n in map.as_slice() {
        for v in n.iter() {
            data.push(narrow(*v)?);
        }
    }
    Ok(encode_pfm(map.width(), map.height(), 3, &data))
}

pub fn decode_normal(bytes: &[u8]) -> Result<NormalMap> {
    let pfm = decode_pfm(bytes)?;
    if pfm.channels != 3 {
        return Err(Error::parse(0, "expected a three-channel PF normal map"));
    }
    let data = pfm
        .data
        .chunks_exact(3)
        .map(|c| Vec3::new(c[0].into(), c[1].into(), c[2].into()))
        .collect();
    Grid2::from_vec(pfm.width, pfm.height, data)
}

/// Binary PGM with 16-bit big-endian samples; id 0 is void.
pub fn encode_ids(map: &IdMap) -> Result<Vec<u8>> {
    let mut out = format!("P5\n{} {}\n65535\n", map.width(), map.height()).into_bytes();
    out.reserve(map.len() * 2);
    for &id in map.as_slice() {
        let v = u16::try_from(id).map_err(|_| Error::invalid(format!("instance id {id} exceeds 65535")))?;
        out.extend_from_slice(&v.to_be_bytes());
    }
    Ok(out)
}

pub fn decode_ids(bytes: &[u8]) -> Result<IdMap> {
    let header = read_header(bytes, 3)?;
    if header.fields[0].1 != "P5" {
        return Err(Error::parse(0, format!("expected binary PGM magic P5, got {:?}", header.fields[0].1)));
    }
    let width: usize = parse_field(&header.fields[1], "width")?;
    let height: usize = parse_field(&header.fields[2], "height")?;
    let maxval: u32 = parse_field(&header.fields[3], "maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::parse(header.fields[1].0, "image dimensions must be positive"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::parse(header.fields[3].0, format!("maxval {maxval} outside 1..=65535")));
    }
    let wide = maxval > 255;
    let per = if wide { 2 } else { 1 };
    check_payload(&header, bytes.len(), width * height * per)?;
    let payload = &bytes[header.payload..];
    let data = if wide {
        payload.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as u32).collect()
    } else {
        payload.iter().map(|&b| b as u32).collect()
    };
    Grid2::from_vec(width, height, data)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Parse { offset, message } => Error::Parse {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    with_path(path, decode_depth(&read_bytes(path)?))
}

pub fn write_depth(path: &Path, map: &DepthMap) -> Result<()> {
    write_bytes(path, &encode_depth(map)?)
}

pub fn read_normal(path: &Path) -> Result<NormalMap> {
    with_path(path, decode_normal(&read_bytes(path)?))
}

pub fn write_normal(path: &Path, map: &NormalMap) -> Result<()> {
    write_bytes(path, &encode_normal(map)?)
}

pub fn read_ids(path: &Path) -> Result<IdMap> {
    with_path(path, decode_ids(&read_bytes(path)?))
}

pub fn write_ids(path: &Path, map: &IdMap) -> Result<()> {
    write_bytes(path, &encode_ids(map)?)
}

/// One camera of a scene file. Map paths are relative to the scene file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub intrinsics: CameraIntrinsics,
    /// Camera-to-reference; the first view is the reference.
    pub pose: RigidTransform,
    pub depth: PathBuf,
    pub normal: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance: Option<PathBuf>,
}

impl ViewEntry {
    pub fn view(&self) -> View {
        View {
            intrinsics: self.intrinsics,
            pose: self.pose,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPair {
    pub low: PrimitiveGrid,
    pub high: PrimitiveGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub version: u32,
    pub views: Vec<ViewEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub grids: Vec<GridPair>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub selected: Vec<SelectedPrimitive>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub instances: Vec<PlaneInstance>,
}

impl SceneFile {
    pub fn new(views: Vec<ViewEntry>) -> Self {
        SceneFile {
            version: SCENE_VERSION,
            views,
            grids: Vec::new(),
            selected: Vec::new(),
            instances: Vec::new(),
        }
    }

    pub fn cameras(&self) -> Vec<View> {
        self.views.iter().map(ViewEntry::view).collect()
    }
}

/// Maps of one view loaded alongside a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewMaps {
    pub depth: DepthMap,
    pub normal: NormalMap,
    pub instance: Option<IdMap>,
}

fn normalize_pose(i: usize, pose: &mut RigidTransform) -> Result<()> {
    let q = pose.rotation;
    let norm = q.norm();
    if !q.is_finite() || !pose.translation.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid(format!("view {i} has a non-finite pose")));
    }
    if (norm - 1.0).abs() > QUATERNION_NORM_TOLERANCE {
        return Err(Error::invalid(format!("view {i} pose quaternion has norm {norm}, not 1")));
    }
    pose.rotation = q.normalized()?;
    Ok(())
}

/// Parses and validates a scene document without touching referenced files.
pub fn parse_scene(text: &str) -> Result<SceneFile> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == SCENE_VERSION as u64 => {}
        Some(v) => return Err(Error::invalid(format!("unsupported scene version {v}"))),
        None => return Err(Error::invalid("scene file has no version tag")),
    }
    let mut scene: SceneFile = serde_json::from_value(value)?;
    if scene.views.is_empty() {
        return Err(Error::invalid("scene file lists no views"));
    }
    for (i, v) in scene.views.iter_mut().enumerate() {
        v.intrinsics.validate()?;
        normalize_pose(i, &mut v.pose)?;
    }
    Ok(scene)
}

pub fn read_scene(path: &Path) -> Result<SceneFile> {
    parse_scene(&fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?)
}

pub fn write_scene(path: &Path, scene: &SceneFile) -> Result<()> {
    let mut text = serde_json::to_string_pretty(scene)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn resolve(scene_path: &Path, rel: &Path) -> PathBuf {
    scene_path.parent().unwrap_or(Path::new("")).join(rel)
}

/// Loads the maps referenced by `scene`, checking them against each camera.
pub fn load_view_maps(scene_path: &Path, scene: &SceneFile) -> Result<Vec<ViewMaps>> {
    scene
        .views
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let depth = read_depth(&resolve(scene_path, &v.depth))?;
            let normal = read_normal(&resolve(scene_path, &v.normal))?;
            let instance = v.instance.as_ref().map(|p| read_ids(&resolve(scene_path, p))).transpose()?;
            let (w, h) = (v.intrinsics.width, v.intrinsics.height);
            let fits = depth.width() == w && depth.height() == h && normal.same_shape(&depth) && instance.as_ref().is_none_or(|m| m.same_shape(&depth));
            if !fits {
                return Err(Error::invalid(format!("maps of view {i} do not match its {w}x{h} camera")));
            }
            Ok(ViewMaps { depth, normal, instance })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::geometry::Quaternion;

    fn random_depth(w: usize, h: usize, seed: u64) -> DepthMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DepthMap::from_fn(w, h, |_, _| rng.gen_range(0.1f32..10.0) as f64)
    }

    #[test]
    fn depth_round_trip_is_bitwise() {
        let map = random_depth(64, 48, 1);
        let bytes = encode_depth(&map).unwrap();
        assert!(bytes.starts_with(b"Pf\n64 48\n-1.0\n"));
        let back = decode_depth(&bytes).unwrap();
        assert!(map.as_slice().iter().zip(back.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(encode_depth(&back).unwrap(), bytes);
    }

    #[test]
    fn rows_are_stored_bottom_to_top() {
        let map = DepthMap::from_fn(2, 2, |c, r| (r * 2 + c) as f64);
        let bytes = encode_depth(&map).unwrap();
        let payload = &bytes[bytes.len() - 16..];
        let first = f32::from_le_bytes(payload[..4].try_into().unwrap());
        assert_eq!(first, 2.0);
    }

    #[test]
    fn conformant_header_is_accepted() {
        let mut bytes = b"Pf\n64 48\n-1.0\n".to_vec();
        bytes.extend(std::iter::repeat_n(0u8, 64 * 48 * 4));
        let map = decode_depth(&bytes).unwrap();
        assert_eq!((map.width(), map.height()), (64, 48));
    }

    #[test]
    fn big_endian_payloads_decode() {
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&2.5f32.to_be_bytes());
        assert_eq!(decode_depth(&bytes).unwrap().as_slice(), &[2.5]);
    }

    #[test]
    fn truncated_payload_reports_lengths() {
        let mut bytes = encode_depth(&random_depth(64, 48, 2)).unwrap();
        bytes.truncate(bytes.len() - 4);
        match decode_depth(&bytes) {
            Err(Error::Parse { offset, message }) => {
                assert_eq!(offset, 14);
                assert!(message.contains("12284") && message.contains("12288"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_headers_are_parse_errors() {
        for bad in [&b"P7\n1 1\n-1\n\0\0\0\0"[..], b"Pf\n1 x\n-1\n\0\0\0\0", b"Pf\n1 1\n0\n\0\0\0\0", b"Pf\n1", b"PF\n0 1\n-1\n"] {
            assert!(matches!(decode_depth(bad), Err(Error::Parse { .. })), "{:?}", String::from_utf8_lossy(bad));
        }
        let offset = match decode_depth(b"Pf\n1 x\n-1\n\0\0\0\0") {
            Err(Error::Parse { offset, .. }) => offset,
            other => panic!("{other:?}"),
        };
        assert_eq!(offset, 5);
        let normals = encode_normal(&NormalMap::filled(2, 2, Vec3::z())).unwrap();
        assert!(decode_depth(&normals).is_err());
    }

    #[test]
    fn normal_and_id_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normals = NormalMap::from_fn(16, 8, |_, _| Vec3::new(rng.gen_range(-1.0f32..1.0) as f64, rng.gen_range(-1.0f32..1.0) as f64, 0.5));
        assert_eq!(decode_normal(&encode_normal(&normals).unwrap()).unwrap(), normals);
        let ids = IdMap::from_fn(16, 8, |c, r| (c * 4000 + r) as u32);
        let bytes = encode_ids(&ids).unwrap();
        assert!(bytes.starts_with(b"P5\n16 8\n65535\n"));
        assert_eq!(decode_ids(&bytes).unwrap(), ids);
        assert!(encode_ids(&IdMap::filled(1, 1, 70000)).is_err());
        assert!(encode_depth(&DepthMap::filled(1, 1, f64::NAN)).is_err());
    }

    #[test]
    fn eight_bit_pgm_with_comments() {
        let bytes = b"P5\n# ids\n2 1\n255\n\x03\x00";
        assert_eq!(decode_ids(bytes).unwrap().as_slice(), &[3, 0]);
    }

    fn camera() -> ViewEntry {
        ViewEntry {
            intrinsics: CameraIntrinsics::centered(50.0, 32, 16).unwrap(),
            pose: RigidTransform::IDENTITY,
            depth: "d.pfm".into(),
            normal: "n.pfm".into(),
            instance: Some("i.pgm".into()),
        }
    }

    #[test]
    fn scene_round_trip_with_maps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.json");
        let scene = SceneFile::new(vec![camera()]);
        write_scene(&path, &scene).unwrap();
        write_depth(&dir.path().join("d.pfm"), &DepthMap::filled(32, 16, 2.0)).unwrap();
        write_normal(&dir.path().join("n.pfm"), &NormalMap::filled(32, 16, Vec3::z())).unwrap();
        write_ids(&dir.path().join("i.pgm"), &IdMap::filled(32, 16, 1)).unwrap();
        let back = read_scene(&path).unwrap();
        assert_eq!(back, scene);
        let maps = load_view_maps(&path, &back).unwrap();
        assert_eq!(maps[0].depth.as_slice()[0], 2.0);
        assert!(maps[0].instance.is_some());

        write_depth(&dir.path().join("d.pfm"), &DepthMap::filled(16, 16, 2.0)).unwrap();
        assert!(load_view_maps(&path, &back).is_err());
        std::fs::remove_file(dir.path().join("n.pfm")).unwrap();
        assert!(matches!(load_view_maps(&path, &back), Err(Error::Io(_))));
    }

    #[test]
    fn scene_validation() {
        let good = serde_json::to_value(SceneFile::new(vec![camera()])).unwrap();
        assert!(parse_scene(&good.to_string()).is_ok());

        let mut untagged = good.clone();
        untagged.as_object_mut().unwrap().remove("version");
        assert!(parse_scene(&untagged.to_string()).is_err());

        let with_rotation = |q: [f64; 4]| {
            let mut v = good.clone();
            v["views"][0]["pose"]["rotation"] = serde_json::json!(q);
            parse_scene(&v.to_string())
        };
        let slightly = with_rotation([1.0 + 5e-7, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(slightly.views[0].pose.rotation, Quaternion::IDENTITY);
        assert!(with_rotation([1.0 + 2e-6, 0.0, 0.0, 0.0]).is_err());
        assert!(parse_scene("{\"version\": 1,").is_err());
    }
}
