use proptest::prelude::*;
use verdrift::capture::{DeviceDayCapture, ProtocolLane};
use verdrift::fingerprint::{decode_png, encode_png, is_degenerate, port_pixel, render_pixels, IMAGE_COLS, IMAGE_ROWS, PIXEL_COUNT};
use verdrift::flow::{compute_device_day, LaneWindowStats, CROSS_PROTOCOL, FEATURE_COUNT, PACKET_GROUP, PORT_GROUP, TIMING_GROUP};

type Window = [LaneWindowStats; ProtocolLane::COUNT];

fn window() -> impl Strategy<Value = Window> {
    let lane = prop::collection::vec(0.0f64..5000.0, FEATURE_COUNT).prop_map(|v| {
        let mut values = [0.0; FEATURE_COUNT];
        values.copy_from_slice(&v);
        for c in PORT_GROUP {
            values[c] = values[c].floor().min(65535.0);
        }
        LaneWindowStats::from_values(values)
    });
    prop::collection::vec(lane, ProtocolLane::COUNT).prop_map(|v| {
        let mut w = [LaneWindowStats::default(); ProtocolLane::COUNT];
        w.copy_from_slice(&v);
        w
    })
}

fn row(px: &[u8], r: usize) -> &[u8] {
    &px[r * IMAGE_COLS..(r + 1) * IMAGE_COLS]
}

proptest! {
    #[test]
    fn shape_is_thirteen_by_fifty_three(w in window()) {
        let px = render_pixels(&w);
        prop_assert_eq!(px.len(), 13 * 53);
        let png = encode_png(&px).unwrap();
        prop_assert_eq!(&png[16..20], &53u32.to_be_bytes());
        prop_assert_eq!(&png[20..24], &13u32.to_be_bytes());
        prop_assert_eq!(decode_png(&png).unwrap(), px);
    }

    #[test]
    fn per_row_rescaling_leaves_pixels(w in window(), r in 0usize..13, k in 0.001f64..1000.0, shift in -100.0f64..100.0) {
        let before = render_pixels(&w);
        for group in [PACKET_GROUP, TIMING_GROUP] {
            let mut scaled = w;
            for c in group.clone() {
                scaled[r].values_mut()[c] = scaled[r].get(c) * k;
            }
            let after = render_pixels(&scaled);
            prop_assert_eq!(row(&after, r), row(&before, r));
            let mut moved = w;
            for c in group {
                moved[r].values_mut()[c] = moved[r].get(c) + shift;
            }
            let after = render_pixels(&moved);
            prop_assert_eq!(row(&after, r), row(&before, r));
        }
    }

    #[test]
    fn cross_protocol_block_is_scaled_together(w in window(), k in 0.001f64..1000.0) {
        let before = render_pixels(&w);
        let mut scaled = w;
        for lane in scaled.iter_mut() {
            for c in CROSS_PROTOCOL {
                lane.values_mut()[c] *= k;
            }
        }
        prop_assert_eq!(render_pixels(&scaled), before);
    }

    #[test]
    fn port_pixels_use_the_fixed_scale(w in window(), r in 0usize..13, other in 0.0f64..5000.0) {
        let px = render_pixels(&w);
        for c in PORT_GROUP {
            let expect = (w[r].get(c) * 255.0 / 65535.0 + 0.5).floor() as u8;
            prop_assert_eq!(px[r * IMAGE_COLS + c], expect);
            prop_assert_eq!(port_pixel(w[r].get(c)), expect);
        }
        let mut changed = w;
        changed[(r + 1) % 13].values_mut()[PACKET_GROUP.start] = other;
        changed[r].values_mut()[TIMING_GROUP.start] = other;
        let again = render_pixels(&changed);
        for c in PORT_GROUP {
            prop_assert_eq!(again[r * IMAGE_COLS + c], px[r * IMAGE_COLS + c]);
        }
    }
}

#[test]
fn silent_capture_gives_degenerate_images() {
    let cap = DeviceDayCapture::new("quiet", 1, Vec::new()).unwrap();
    let stats = compute_device_day(&cap);
    assert_eq!(stats.per_window.len(), 30);
    for w in &stats.per_window {
        let px = render_pixels(w);
        assert!(px.iter().all(|&p| p == 0));
        assert!(is_degenerate(&px));
    }
    assert!(is_degenerate(&[255; PIXEL_COUNT]));
    let mut mixed = [0u8; PIXEL_COUNT];
    mixed[IMAGE_ROWS * 7] = 1;
    assert!(!is_degenerate(&mixed));
}
