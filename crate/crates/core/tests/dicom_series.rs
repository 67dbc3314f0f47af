use std::path::Path;

use blindspot_core::data::{load_dicom_series, window_normalize, HuWindow, Provenance};
use blindspot_core::Error;
use dicom_core::{DataElement, PrimitiveValue, VR};
use dicom_dictionary_std::{tags, uids};
use dicom_object::{FileMetaTableBuilder, InMemDicomObject};

struct Slice<'a> {
    stored: &'a [u16],
    rows: u16,
    cols: u16,
    slope: Option<&'a str>,
    intercept: &'a str,
    z: Option<f64>,
    instance: Option<i32>,
    signed: bool,
}

impl<'a> Slice<'a> {
    fn new(stored: &'a [u16], rows: u16, cols: u16) -> Self {
        Self {
            stored,
            rows,
            cols,
            slope: Some("1"),
            intercept: "-1024",
            z: None,
            instance: None,
            signed: false,
        }
    }
}

fn write_slice(path: &Path, s: &Slice) {
    let sop = format!("2.25.{}", path.file_stem().unwrap().len() as u64 * 7919 + s.stored.len() as u64);
    let mut obj = InMemDicomObject::new_empty();
    obj.put(DataElement::new(tags::SOP_CLASS_UID, VR::UI, uids::CT_IMAGE_STORAGE));
    obj.put(DataElement::new(tags::SOP_INSTANCE_UID, VR::UI, sop.as_str()));
    obj.put(DataElement::new(tags::MODALITY, VR::CS, "CT"));
    obj.put(DataElement::new(tags::PATIENT_ID, VR::LO, "L067"));
    obj.put(DataElement::new(tags::ROWS, VR::US, PrimitiveValue::from(s.rows)));
    obj.put(DataElement::new(tags::COLUMNS, VR::US, PrimitiveValue::from(s.cols)));
    obj.put(DataElement::new(tags::BITS_ALLOCATED, VR::US, PrimitiveValue::from(16u16)));
    obj.put(DataElement::new(tags::BITS_STORED, VR::US, PrimitiveValue::from(16u16)));
    obj.put(DataElement::new(tags::HIGH_BIT, VR::US, PrimitiveValue::from(15u16)));
    obj.put(DataElement::new(tags::SAMPLES_PER_PIXEL, VR::US, PrimitiveValue::from(1u16)));
    obj.put(DataElement::new(tags::PHOTOMETRIC_INTERPRETATION, VR::CS, "MONOCHROME2"));
    obj.put(DataElement::new(
        tags::PIXEL_REPRESENTATION,
        VR::US,
        PrimitiveValue::from(u16::from(s.signed)),
    ));
    if let Some(slope) = s.slope {
        obj.put(DataElement::new(tags::RESCALE_SLOPE, VR::DS, slope));
    }
    obj.put(DataElement::new(tags::RESCALE_INTERCEPT, VR::DS, s.intercept));
    obj.put(DataElement::new(tags::PIXEL_SPACING, VR::DS, "0.7\\0.7"));
    if let Some(z) = s.z {
        obj.put(DataElement::new(
            tags::IMAGE_POSITION_PATIENT,
            VR::DS,
            format!("0\\0\\{z}").as_str(),
        ));
    }
    if let Some(n) = s.instance {
        obj.put(DataElement::new(tags::INSTANCE_NUMBER, VR::IS, n.to_string().as_str()));
    }
    obj.put(DataElement::new(
        tags::PIXEL_DATA,
        VR::OW,
        PrimitiveValue::U16(s.stored.iter().copied().collect()),
    ));
    let file = obj.with_exact_meta(
        FileMetaTableBuilder::new()
            .transfer_syntax(uids::EXPLICIT_VR_LITTLE_ENDIAN)
            .media_storage_sop_class_uid(uids::CT_IMAGE_STORAGE)
            .media_storage_sop_instance_uid(sop.as_str())
            .build()
            .unwrap(),
    );
    file.write_to_file(path).unwrap();
}

#[test]
fn stored_values_map_to_hounsfield_units() {
    let dir = tempfile::tempdir().unwrap();
    write_slice(&dir.path().join("a.dcm"), &Slice::new(&[0, 1024, 2048, 4095], 2, 2));
    let series = load_dicom_series(dir.path()).unwrap();
    assert_eq!(series.len(), 1);
    let hu = series[0].pixels.data();
    assert_eq!(hu, &[-1024.0, 0.0, 1024.0, 3071.0]);
    assert_eq!(series[0].patient_id, "L067");
    assert_eq!(series[0].spacing, (0.7, 0.7));

    let norm = window_normalize(&series[0], HuWindow::default(), Provenance::RealLdct).unwrap();
    assert_eq!(norm.pixels.get(0, 0), 0.0);
    assert!((norm.pixels.get(1, 0) as f64 - 2048.0 / 4096.0).abs() < 1e-7);
}

#[test]
fn slope_and_signed_pixels_are_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let stored: Vec<u16> = [-1000i16, -1, 0, 500].iter().map(|&v| v as u16).collect();
    let mut s = Slice::new(&stored, 2, 2);
    s.signed = true;
    s.slope = Some("2");
    s.intercept = "10";
    write_slice(&dir.path().join("a.dcm"), &s);
    let series = load_dicom_series(dir.path()).unwrap();
    assert_eq!(series[0].pixels.data(), &[-1990.0, 8.0, 10.0, 1010.0]);
}

#[test]
fn slices_sort_by_position_then_instance() {
    let dir = tempfile::tempdir().unwrap();
    for (name, value, z) in [("a.dcm", 30u16, 5.0), ("b.dcm", 10, -5.0), ("c.dcm", 20, 0.0)] {
        let stored = [value; 4];
        let mut s = Slice::new(&stored, 2, 2);
        s.z = Some(z);
        write_slice(&dir.path().join(name), &s);
    }
    let firsts: Vec<f32> = load_dicom_series(dir.path())
        .unwrap()
        .iter()
        .map(|s| s.pixels.get(0, 0))
        .collect();
    assert_eq!(firsts, vec![-1014.0, -1004.0, -994.0]);

    let dir = tempfile::tempdir().unwrap();
    for (name, value, n) in [("a.dcm", 30u16, 3), ("b.dcm", 10, 1), ("c.dcm", 20, 2)] {
        let stored = [value; 4];
        let mut s = Slice::new(&stored, 2, 2);
        s.instance = Some(n);
        write_slice(&dir.path().join(name), &s);
    }
    let series = load_dicom_series(dir.path()).unwrap();
    let indices: Vec<usize> = series.iter().map(|s| s.slice_index).collect();
    assert_eq!(indices, vec![0, 1, 2]);
    assert_eq!(series[0].pixels.get(0, 0), -1014.0);
    assert_eq!(series[2].pixels.get(0, 0), -994.0);
}

#[test]
fn missing_rescale_slope_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = Slice::new(&[0; 4], 2, 2);
    s.slope = None;
    write_slice(&dir.path().join("broken.dcm"), &s);
    let err = load_dicom_series(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Dicom { .. }));
    let msg = err.to_string();
    assert!(msg.contains("broken.dcm") && msg.contains("slope"), "{msg}");
}

#[test]
fn inconsistent_dimensions_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_slice(&dir.path().join("a.dcm"), &Slice::new(&[0; 4], 2, 2));
    write_slice(&dir.path().join("b.dcm"), &Slice::new(&[0; 6], 2, 3));
    let msg = load_dicom_series(dir.path()).unwrap_err().to_string();
    assert!(msg.contains("b.dcm") && msg.contains("dimensions"), "{msg}");
}

#[test]
fn empty_directory_has_no_slices() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("manifest.jsonl"), "").unwrap();
    assert!(matches!(load_dicom_series(dir.path()), Err(Error::NoSlices(_))));
}

#[test]
fn non_dicom_file_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("notes.txt"), "hello").unwrap();
    let msg = load_dicom_series(dir.path()).unwrap_err().to_string();
    assert!(msg.contains("notes.txt"), "{msg}");
}
