use pointvid::error::PvError;
use pointvid::formats::{
    decode_tensor, encode_tensor, ply_string, ppm_bytes, read_ppm, read_tensor, to_byte, write_ppm_frames, write_tensor,
};
use pointvid_core::tensor::{RgbVideo, TensorF};

fn sample_tensor() -> TensorF {
    TensorF::new(vec![2, 3, 4], (0..24).map(|i| i as f32 * 0.25 - 3.0).collect()).unwrap()
}

#[test]
fn vpt_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let t = TensorF::new(vec![3, 5], vec![f32::MIN_POSITIVE, -0.0, 1e-30, 3.5, -7.25, 0.1, 1e30, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]).unwrap();
    let p = dir.path().join("t.vpt");
    write_tensor(&t, &p).unwrap();
    let back = read_tensor(&p).unwrap();
    assert_eq!(back.dims(), t.dims());
    assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(std::fs::read(&p).unwrap(), encode_tensor(&t));
}

#[test]
fn vpt_errors_report_offsets() {
    let good = encode_tensor(&sample_tensor());
    let mut bad = good.clone();
    bad[0] = b'X';
    assert_eq!(decode_tensor(&bad).unwrap_err().0, 0);

    let mut bad = good.clone();
    bad[4..8].copy_from_slice(&9u32.to_le_bytes());
    assert_eq!(decode_tensor(&bad).unwrap_err().0, 4);

    let mut bad = good.clone();
    bad[12..16].copy_from_slice(&0u32.to_le_bytes());
    assert_eq!(decode_tensor(&bad).unwrap_err().0, 12);

    let short = &good[..good.len() - 3];
    assert_eq!(decode_tensor(short).unwrap_err().0, short.len() as u64);

    let mut long = good.clone();
    long.push(0);
    assert_eq!(decode_tensor(&long).unwrap_err().0, good.len() as u64);

    let mut nan = good.clone();
    let off = 8 + 4 * 3 + 4 * 5;
    nan[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    assert_eq!(decode_tensor(&nan).unwrap_err().0, off as u64);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.vpt");
    std::fs::write(&p, b"nope").unwrap();
    let e = read_tensor(&p).unwrap_err();
    assert!(matches!(e, PvError::Format { offset: 0, .. }));
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn ppm_quantizes_and_round_trips() {
    assert_eq!(to_byte(0.5), 128);
    assert_eq!(to_byte(0.0), 0);
    assert_eq!(to_byte(1.0), 255);
    let bytes = ppm_bytes(1, 1, &[0.5, 0.0, 1.0]).unwrap();
    assert_eq!(bytes, b"P6\n1 1\n255\n\x80\x00\xff");
    assert!(ppm_bytes(1, 1, &[1.5, 0.0, 0.0]).is_err());

    let dir = tempfile::tempdir().unwrap();
    let data: Vec<f32> = (0..2 * 3 * 4 * 3).map(|i| (i % 256) as f32 / 255.0).collect();
    let v = RgbVideo::new(TensorF::new(vec![2, 3, 4, 3], data.clone()).unwrap()).unwrap();
    let paths = write_ppm_frames(&v, dir.path()).unwrap();
    assert_eq!(paths.len(), 2);
    assert!(paths[1].ends_with("frame_001.ppm"));
    let (w, h, px) = read_ppm(&paths[1]).unwrap();
    assert_eq!((w, h), (4, 3));
    assert_eq!(px, data[36..].to_vec());
}

#[test]
fn ply_has_one_line_per_vertex() {
    let pts = [[0.0, 1.0, 2.0], [3.5, -1.0, 0.25], [1e-3, 2e3, 5.0]];
    let s = ply_string(&pts, Some(&[[1, 2, 3], [4, 5, 6], [7, 8, 9]])).unwrap();
    let (header, body) = s.split_once("end_header\n").unwrap();
    assert!(header.contains("element vertex 3\n"));
    assert!(header.contains("property uchar red"));
    let lines: Vec<&str> = body.lines().collect();
    assert_eq!(lines.len(), 3);
    let parsed: Vec<f64> = lines[1].split_whitespace().take(3).map(|v| v.parse().unwrap()).collect();
    assert_eq!(parsed, vec![3.5, -1.0, 0.25]);

    let empty = ply_string(&[], None).unwrap();
    assert!(empty.contains("element vertex 0\n") && empty.ends_with("end_header\n"));
    assert!(ply_string(&[[f64::NAN, 0.0, 0.0]], None).is_err());
}
