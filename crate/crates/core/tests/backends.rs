use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use magicforge_core::backends::wire::dispatch;
use magicforge_core::backends::{
    BackendError, Backends, Detector, ImageGenerator, MockBackend, MockNoise, RemoteClient, Segmenter,
    TextGenerator, TextRequest,
};
use magicforge_core::prompt::{build_instruction, ConditionSet};
use magicforge_core::{CategoryId, Vocabulary};

fn vocab() -> Vocabulary {
    Vocabulary::new(["cat", "dog", "bus", "kite", "vase", "boot", "apple", "clock"]).unwrap()
}

type Handler = dyn Fn(&str, &str) -> (u16, String) + Send + Sync;

/// Minimal HTTP/1.1 server; one request per connection.
fn serve(handler: Arc<Handler>) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let handler = handler.clone();
            thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let path = line.split_whitespace().nth(1).unwrap_or("/").to_string();
                let mut len = 0usize;
                loop {
                    let mut h = String::new();
                    reader.read_line(&mut h).unwrap();
                    if h.trim().is_empty() {
                        break;
                    }
                    if let Some((k, v)) = h.split_once(':') {
                        if k.eq_ignore_ascii_case("content-length") {
                            len = v.trim().parse().unwrap();
                        }
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                let (status, resp) = handler(&path, &String::from_utf8(body).unwrap());
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{resp}",
                    resp.len()
                );
            });
        }
    });
    format!("http://{addr}")
}

#[test]
fn mock_scenes_cover_a_sane_fraction() {
    let m = MockBackend::new(vocab(), MockNoise::default());
    for seed in 0..1000 {
        let f = m.render_scene("a cat and a bus", seed, 64, 64).foreground_fraction();
        assert!((0.05..=0.60).contains(&f), "seed {seed}: {f}");
    }
}

#[test]
fn jittered_boxes_stay_close() {
    let clean = MockBackend::new(vocab(), MockNoise::default());
    let noisy = MockBackend::new(vocab(), MockNoise { jitter_sigma: 2.0, dropout: 0.0, seed: 3 });
    let (mut box_iou, mut mask_iou, mut n) = (0.0, 0.0, 0);
    for seed in 0..100 {
        let scene = clean.render_scene("a kite", seed, 128, 128);
        let truth = scene.truth_box(CategoryId(3), "kite").unwrap();
        let boxes = noisy.detect(&scene.image, &["kite"]).unwrap();
        assert_eq!(boxes.len(), 1);
        assert!(boxes[0].is_valid(128, 128));
        box_iou += boxes[0].iou(&truth);
        mask_iou += noisy.segment(&scene.image, &boxes[0]).unwrap().iou(&scene.truth_mask(CategoryId(3)));
        n += 1;
    }
    assert!(box_iou / n as f64 >= 0.8, "box IoU {}", box_iou / n as f64);
    assert!(mask_iou / n as f64 >= 0.8, "mask IoU {}", mask_iou / n as f64);
}

#[test]
fn full_dropout_returns_nothing() {
    let m = MockBackend::new(vocab(), MockNoise { dropout: 1.0, ..Default::default() });
    for seed in 0..20 {
        let scene = m.render_scene("a dog and a vase", seed, 64, 64);
        assert!(m.detect(&scene.image, &["dog", "vase"]).unwrap().is_empty());
    }
}

#[test]
fn remote_client_matches_local_mock() {
    let local = Backends::mock(&vocab(), MockNoise::default());
    let served = local.clone();
    let url = serve(Arc::new(move |p: &str, b: &str| dispatch(&served, p, b)));
    let remote = RemoteClient::new(&url, 5.0, 0);

    let instruction = build_instruction(&["bus"], &ConditionSet::default(), 1).unwrap();
    let text = remote.generate_text(&TextRequest { instruction: &instruction, categories: &[], seed: 0 }).unwrap();
    assert!(text.to_lowercase().contains("bus"), "{text}");

    let img = remote.generate_image(&text, 4, 80, 60).unwrap();
    assert_eq!(img, local.image.generate_image(&text, 4, 80, 60).unwrap());
    let boxes = remote.detect(&img, &["bus"]).unwrap();
    assert_eq!(boxes, local.detector.detect(&img, &["bus"]).unwrap());
    assert_eq!(boxes.len(), 1);
    let mask = remote.segment(&img, &boxes[0]).unwrap();
    assert_eq!(mask, local.segmenter.segment(&img, &boxes[0]).unwrap());
}

#[test]
fn server_errors_are_retried() {
    let hits = Arc::new(AtomicUsize::new(0));
    let h = hits.clone();
    let url = serve(Arc::new(move |_: &str, _: &str| {
        h.fetch_add(1, Ordering::SeqCst);
        (500, r#"{"error":"boom"}"#.to_string())
    }));
    let err = RemoteClient::new(&url, 5.0, 2).generate_image("x", 0, 8, 8).unwrap_err();
    assert!(matches!(err, BackendError::Transport { attempts: 3, .. }), "{err}");
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let hits = Arc::new(AtomicUsize::new(0));
    let h = hits.clone();
    let url = serve(Arc::new(move |_: &str, _: &str| {
        h.fetch_add(1, Ordering::SeqCst);
        (400, r#"{"error":"bad"}"#.to_string())
    }));
    let err = RemoteClient::new(&url, 5.0, 2).generate_image("x", 0, 8, 8).unwrap_err();
    assert!(matches!(err, BackendError::Rejected { status: 400, .. }), "{err}");
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[test]
fn slow_server_is_bounded_by_timeout_times_attempts() {
    let url = serve(Arc::new(|_: &str, _: &str| {
        thread::sleep(Duration::from_secs(3));
        (200, r#"{"image_b64":""}"#.to_string())
    }));
    let start = Instant::now();
    let err = RemoteClient::new(&url, 0.2, 1).generate_image("x", 0, 8, 8).unwrap_err();
    let elapsed = start.elapsed();
    assert!(matches!(err, BackendError::Transport { attempts: 2, .. }), "{err}");
    assert!(elapsed < Duration::from_millis(1500), "{elapsed:?}");
}

#[test]
fn unknown_route_is_404() {
    let b = Backends::mock(&vocab(), MockNoise::default());
    assert_eq!(dispatch(&b, "/nope", "{}").0, 404);
    assert_eq!(dispatch(&b, "/detect", "not json").0, 400);
}
