use blowup_core::geometry::generate_sample;
use blowup_core::io::{read_curvature, write_curvature};
use blowup_core::{Dim, Error};

#[test]
fn curvature_file_round_trips() {
    let d = Dim::new(12).unwrap();
    let pts: Vec<_> = (0..3)
        .map(|s| generate_sample(d, s, 0.7).unwrap())
        .collect();
    let mut buf = Vec::new();
    write_curvature(&mut buf, d, &pts).unwrap();
    let (d2, back) = read_curvature(buf.as_slice(), false).unwrap();
    assert_eq!(d2.n(), 12);
    assert_eq!(back, pts);
}

#[test]
fn parse_errors_carry_position() {
    let text = "{\n  \"n\": 11,\n  \"points\": [ oops ]\n}";
    match read_curvature(text.as_bytes(), false) {
        Err(Error::Parse(msg)) => assert!(msg.contains("line 3"), "{msg}"),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn unknown_fields_and_low_dimension_are_rejected() {
    let text = r#"{"n": 11, "points": [], "extra": 1}"#;
    assert!(matches!(
        read_curvature(text.as_bytes(), false),
        Err(Error::Parse(_))
    ));
    let text = r#"{"n": 9, "points": []}"#;
    assert!(matches!(
        read_curvature(text.as_bytes(), false),
        Err(Error::Domain(_))
    ));
    assert!(read_curvature(text.as_bytes(), true).is_ok());
}

#[test]
fn wrong_shapes_are_structural_errors() {
    let d = Dim::new(11).unwrap();
    let mut buf = Vec::new();
    write_curvature(&mut buf, d, &[generate_sample(d, 1, 1.0).unwrap()]).unwrap();
    let text = String::from_utf8(buf)
        .unwrap()
        .replacen("\"n\": 11", "\"n\": 12", 1);
    assert!(matches!(
        read_curvature(text.as_bytes(), false),
        Err(Error::Structural(_))
    ));
}
