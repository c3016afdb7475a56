mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;

use proptest::prelude::*;
use trinerflet::superres::external::{decode_message, encode_message, read_message, ImageInfo, MessageHeader};
use trinerflet::superres::{
    guided_denoise_direction, is_refresh_step, map_back, pad_or_crop_pair, tmax_schedule, ExternalRefiner, PlacementKind,
    RefineRequest, Refiner, SrConfig,
};
use trinerflet::wavelet::Plane;

fn ramp(h: usize, w: usize) -> Plane {
    Plane::from_fn(h, w, 3, |y, x, c| (y * 1000 + x * 3 + c) as f64)
}

#[test]
fn tmax_follows_the_published_schedule() {
    let sr = SrConfig::default();
    assert_eq!(tmax_schedule(sr.s_lr, &sr), 0.98);
    assert_eq!(tmax_schedule(sr.s, &sr), 0.25);
    assert!((tmax_schedule((sr.s_lr + sr.s) / 2, &sr) - 0.615).abs() < 1e-12);
    assert_eq!(tmax_schedule(0, &sr), 0.98);
    assert_eq!(tmax_schedule(sr.s + 100, &sr), 0.25);
}

#[test]
fn refresh_steps_start_at_s_lr() {
    let sr = SrConfig::default();
    assert!(!is_refresh_step(sr.s_lr - 1, &sr));
    assert!(is_refresh_step(sr.s_lr, &sr));
    assert!(!is_refresh_step(sr.s_lr + 1, &sr));
    assert!(is_refresh_step(sr.s_lr + 3 * sr.s_refresh, &sr));
}

#[test]
fn native_size_inputs_pass_through() {
    let (lr, hr) = (ramp(128, 128), ramp(512, 512));
    let mut r = common::rng(0);
    let (l, h, p) = pad_or_crop_pair(&lr, &hr, 128, 512, &mut r).unwrap();
    assert_eq!(p.kind, PlacementKind::Identity);
    assert_eq!((l, h), (lr, hr.clone()));
    assert_eq!(map_back(&hr, &p, &hr).unwrap(), hr);
}

#[test]
fn small_inputs_are_padded_top_left() {
    let (lr, hr) = (ramp(100, 100), ramp(400, 400));
    let mut r = common::rng(0);
    let (l, h, p) = pad_or_crop_pair(&lr, &hr, 128, 512, &mut r).unwrap();
    assert_eq!(p.kind, PlacementKind::Pad);
    assert_eq!((l.shape(), h.shape()), ((128, 128, 3), (512, 512, 3)));
    assert_eq!(l.texel(99, 99), lr.texel(99, 99));
    assert_eq!(l.texel(100, 5), &[0.0; 3]);
    assert_eq!(h.texel(399, 0), hr.texel(399, 0));
    assert_eq!(h.texel(0, 400), &[0.0; 3]);
    let base = Plane::zeros(400, 400, 3);
    assert_eq!(map_back(&h, &p, &base).unwrap(), hr);
}

#[test]
fn large_inputs_are_cropped_on_aligned_boxes() {
    let (lr, hr) = (ramp(200, 200), ramp(800, 800));
    let mut seen = std::collections::BTreeSet::new();
    for seed in 0..1000 {
        let mut r = common::rng(seed);
        let (l, h, p) = pad_or_crop_pair(&lr, &hr, 128, 512, &mut r).unwrap();
        assert_eq!(p.kind, PlacementKind::Crop);
        assert_eq!((p.hr.y, p.hr.x), (4 * p.lr.y, 4 * p.lr.x));
        assert_eq!((p.lr.height, p.hr.height), (128, 512));
        assert!(p.lr.y + 128 <= 200 && p.lr.x + 128 <= 200);
        assert_eq!(l.texel(0, 0), lr.texel(p.lr.y, p.lr.x));
        assert_eq!(h.texel(511, 511), hr.texel(p.hr.y + 511, p.hr.x + 511));
        seen.insert((p.lr.y, p.lr.x));
    }
    assert!(seen.len() > 900);
}

#[test]
fn mismatched_ratios_are_rejected() {
    let mut r = common::rng(0);
    assert!(pad_or_crop_pair(&ramp(100, 100), &ramp(300, 300), 128, 512, &mut r).is_err());
    assert!(pad_or_crop_pair(&ramp(100, 100), &ramp(400, 400), 128, 500, &mut r).is_err());
}

proptest! {
    #[test]
    fn mixed_sides_keep_the_scaled_box(h in 1usize..300, w in 1usize..300, seed in any::<u64>()) {
        let (lr, hr) = (Plane::zeros(h, w, 3), Plane::zeros(4 * h, 4 * w, 3));
        let mut r = common::rng(seed);
        let (_, _, p) = pad_or_crop_pair(&lr, &hr, 128, 512, &mut r).unwrap();
        prop_assert_eq!((p.hr.y, p.hr.x, p.hr.height, p.hr.width), (4 * p.lr.y, 4 * p.lr.x, 4 * p.lr.height, 4 * p.lr.width));
        prop_assert_eq!(p.lr.height, h.min(128));
        prop_assert_eq!(p.lr.width, w.min(128));
    }

    #[test]
    fn guidance_interpolates(a in -5.0f64..5.0, b in -5.0f64..5.0, alpha in 0.0f64..10.0) {
        let u = Plane::from_fn(2, 2, 1, |_, _, _| a);
        let c = Plane::from_fn(2, 2, 1, |_, _, _| b);
        let out = guided_denoise_direction(&u, &c, alpha).unwrap();
        prop_assert!((out.get(1, 1, 0) - (a + alpha * (b - a))).abs() < 1e-12);
        let zero = guided_denoise_direction(&u, &c, 0.0).unwrap();
        prop_assert_eq!(zero, u.clone());
    }
}

#[test]
fn guidance_rejects_shape_mismatch() {
    assert!(guided_denoise_direction(&Plane::zeros(2, 2, 3), &Plane::zeros(2, 3, 3), 7.5).is_err());
}

fn request_parts() -> (Plane, Plane) {
    let mut r = common::rng(4);
    (common::random_plane(8, 8, 3, &mut r), common::random_plane(4, 4, 3, &mut r))
}

#[test]
fn messages_round_trip() {
    let (hr, lr) = request_parts();
    let header = MessageHeader {
        frame: 2,
        step: 77,
        t: 0.5,
        images: vec![
            ImageInfo { name: "hr_estimate".into(), height: 8, width: 8, channels: 3 },
            ImageInfo { name: "lr".into(), height: 4, width: 4, channels: 3 },
        ],
    };
    let bytes = encode_message(&header, &[&hr, &lr]).unwrap();
    let (h, imgs) = decode_message(&bytes).unwrap();
    assert_eq!(h, header);
    for (a, b) in imgs.iter().zip([&hr, &lr]) {
        let worst = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-6);
    }
    assert!(decode_message(&bytes[..bytes.len() - 1]).is_err());
    let (h2, _) = read_message(&mut &bytes[..]).unwrap();
    assert_eq!(h2.step, 77);
    assert!(encode_message(&header, &[&hr]).is_err());
}

const ECHO: &str = r#"
import json, struct, sys
inp, out = sys.stdin.buffer, sys.stdout.buffer
while True:
    raw = inp.read(4)
    if len(raw) < 4:
        break
    header = json.loads(inp.read(struct.unpack('<I', raw)[0]))
    sizes = [i['height'] * i['width'] * i['channels'] for i in header['images']]
    body = struct.unpack('<%df' % sum(sizes), inp.read(4 * sum(sizes)))
    first = header['images'][0]
    reply = json.dumps({'images': [dict(first, name='refined')]}).encode()
    out.write(struct.pack('<I', len(reply)) + reply)
    out.write(struct.pack('<%df' % sizes[0], *[0.5 * v for v in body[:sizes[0]]]))
    out.flush()
"#;

fn check_halved(refiner: &mut ExternalRefiner) {
    let (hr, lr) = request_parts();
    for step in 0..3 {
        let req = RefineRequest { frame: 1, step, hr_estimate: &hr, lr_gt: &lr, t: 0.3 };
        let out = refiner.refine(&req).unwrap();
        assert_eq!(out.shape(), hr.shape());
        for (a, b) in out.data().iter().zip(hr.data()) {
            assert!((a - 0.5 * b).abs() < 1e-6);
        }
    }
}

#[test]
fn pipe_refiner_speaks_the_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("echo.py");
    std::fs::write(&script, ECHO).unwrap();
    let mut refiner = ExternalRefiner::connect(&format!("python3 {}", script.display())).unwrap();
    assert_eq!(refiner.native_sizes(), Some((128, 512)));
    check_halved(&mut refiner);
}

#[test]
fn broken_pipe_refiner_reports_an_error() {
    let mut refiner = ExternalRefiner::spawn("true").unwrap();
    let (hr, lr) = request_parts();
    let req = RefineRequest { frame: 0, step: 0, hr_estimate: &hr, lr_gt: &lr, t: 0.3 };
    assert!(refiner.refine(&req).is_err());
}

fn serve_once(listener: &TcpListener) {
    let (stream, _) = listener.accept().unwrap();
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut length = 0;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                length = v.trim().parse().unwrap();
            }
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).unwrap();
    let (header, images) = decode_message(&body).unwrap();
    let mut info = header.images[0].clone();
    info.name = "refined".into();
    let mut half = images[0].clone();
    half.data_mut().iter_mut().for_each(|v| *v *= 0.5);
    let reply = encode_message(&MessageHeader { frame: 0, step: 0, t: 0.0, images: vec![info] }, &[&half]).unwrap();
    let mut stream = stream;
    write!(
        stream,
        "HTTP/1.1 200 OK\r\nContent-Type: application/octet-stream\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        reply.len()
    )
    .unwrap();
    stream.write_all(&reply).unwrap();
}

#[test]
fn http_refiner_speaks_the_protocol() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/refine", listener.local_addr().unwrap());
    let server = std::thread::spawn(move || {
        for _ in 0..3 {
            serve_once(&listener);
        }
    });
    let mut refiner = ExternalRefiner::connect(&url).unwrap();
    check_halved(&mut refiner);
    server.join().unwrap();
}
