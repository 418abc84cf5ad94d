use stpn_web::{categorize_shift, support_indices, ClipView};

#[test]
fn clip_view_is_deterministic() {
    let a = ClipView::new(9, 6, 24, 4, 5, 0.6, 0.5).unwrap();
    let b = ClipView::new(9, 6, 24, 4, 5, 0.6, 0.5).unwrap();
    assert_eq!(a.frames(), 6);
    assert_eq!((a.width(), a.height()), (24, 24));
    assert_eq!(a.class_label(), b.class_label());
    assert_eq!(a.speed_category(), b.speed_category());
    for t in 0..6 {
        assert_eq!(a.degraded(t), b.degraded(t));
        assert_eq!(a.frame_rgba(t, false).unwrap(), b.frame_rgba(t, false).unwrap());
    }
    assert!(!a.degraded(6));
}

#[test]
fn clean_clip_has_no_degraded_frames() {
    let v = ClipView::new(2, 8, 16, 4, 5, 0.6, 0.0).unwrap();
    assert!((0..8).all(|t| !v.degraded(t)));
    assert!((0.0..=1.0).contains(&v.miou()));
}

#[test]
fn medium_shift_and_clamped_support() {
    assert!(categorize_shift(10.0, 0.1, 0.0, 25).unwrap().starts_with("medium:"));
    assert_eq!(support_indices(1, 2, 4, 8, true).unwrap(), vec![0, 0, 3, 5]);
}
