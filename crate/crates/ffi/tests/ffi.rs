use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use medood::segtrain::{predict, save_checkpoint, Checkpoint, ModelConfig, SegmentationModel};
use medood::store::save_manifest;
use medood::{ClassList, DatasetManifest, Patch, Role};
use medood_ffi::*;

fn last_error() -> String {
    let p = medood_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn patch(id: &str, labels: [u8; 4], role: Role) -> Patch {
    Patch {
        id: id.into(),
        region_id: "r".into(),
        offset: (0, 0),
        pad: (0, 0),
        size: 2,
        image: vec![100; 12],
        labelmap: labels.to_vec(),
        role,
    }
}

#[test]
fn count_arithmetic() {
    let mut pnr = 0.0;
    assert_eq!(unsafe { medood_pnr_from_counts(3, 2, &mut pnr) }, MedoodStatus::Ok);
    assert_eq!(pnr, 1.5);
    assert_eq!(unsafe { medood_pnr_from_counts(3, 0, &mut pnr) }, MedoodStatus::NoNegatives);
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { medood_pnr_from_counts(3, 2, ptr::null_mut()) }, MedoodStatus::NullPointer);
    assert!(last_error().contains("out_pnr"));

    assert_eq!(medood_ood_sample_count(0.6, 9684), 5810);
    assert_eq!(medood_ood_sample_count(1.0, 9684), 9684);

    let mut f = 0.0;
    assert_eq!(unsafe { medood_balance_objective(0.6, 65, 40, 100, 0.65, &mut f) }, MedoodStatus::Ok);
    assert_eq!(f, 0.0);

    let mut r = MedoodBalanceResult::default();
    assert_eq!(
        unsafe { medood_estimate_pct_opt(11217, 11600, 9684, 0.65, ptr::null(), 0, &mut r) },
        MedoodStatus::Ok
    );
    assert_eq!(r.pct_opt, 0.6);
    assert_eq!(r.ood_selected, 5810);
    assert!((r.pnr - 0.644).abs() < 1e-3);
    assert!((r.delta_pnr - 0.006).abs() < 1e-3);

    let grid = [0.0, 0.5];
    assert_eq!(
        unsafe { medood_estimate_pct_opt(11217, 11600, 9684, 0.65, grid.as_ptr(), grid.len(), &mut r) },
        MedoodStatus::Ok
    );
    assert_eq!(r.pct_opt, 0.5);
    let bad = [1.5];
    assert_eq!(
        unsafe { medood_estimate_pct_opt(1, 1, 1, 0.65, bad.as_ptr(), 1, &mut r) },
        MedoodStatus::InvalidArgument
    );
}

#[test]
fn mask_metrics() {
    let pred = [1u8, 0, 0, 0];
    let gt = [1u8, 1, 0, 0];
    let mut v = 0.0;
    assert_eq!(unsafe { medood_class_iou(pred.as_ptr(), gt.as_ptr(), 4, &mut v) }, MedoodStatus::Ok);
    assert_eq!(v, 0.5);
    assert_eq!(unsafe { medood_class_dice(pred.as_ptr(), gt.as_ptr(), 4, &mut v) }, MedoodStatus::Ok);
    assert!((v - 2.0 / 3.0).abs() < 1e-12);
    let empty = [0u8; 4];
    assert_eq!(unsafe { medood_class_iou(empty.as_ptr(), empty.as_ptr(), 4, &mut v) }, MedoodStatus::Ok);
    assert_eq!(v, 1.0);
    assert_eq!(unsafe { medood_class_iou(ptr::null(), gt.as_ptr(), 4, &mut v) }, MedoodStatus::NullPointer);
}

#[test]
fn manifest_handles() {
    let dir = tempfile::tempdir().unwrap();
    let classes = ClassList::numbered(1).unwrap();
    let id = DatasetManifest::from_patches(
        classes.clone(),
        2,
        vec![
            patch("a", [1, 1, 1, 1], Role::Id),
            patch("b", [1, 0, 0, 0], Role::Id),
            patch("c", [0; 4], Role::Id),
        ],
    )
    .unwrap();
    let ood = DatasetManifest::from_patches(
        classes,
        2,
        (0..4).map(|i| patch(&format!("o{i}"), [0; 4], Role::Ood)).collect(),
    )
    .unwrap();
    save_manifest(&id, dir.path().join("id")).unwrap();
    save_manifest(&ood, dir.path().join("ood")).unwrap();

    let mut hid: *mut MedoodManifest = ptr::null_mut();
    let mut hood: *mut MedoodManifest = ptr::null_mut();
    unsafe {
        assert_eq!(medood_manifest_load(cpath(&dir.path().join("id")).as_ptr(), &mut hid), MedoodStatus::Ok);
        assert_eq!(medood_manifest_load(cpath(&dir.path().join("ood")).as_ptr(), &mut hood), MedoodStatus::Ok);
        let (mut len, mut n_ood, mut classes) = (0, 0, 0);
        assert_eq!(medood_manifest_info(hid, &mut len, &mut n_ood, &mut classes), MedoodStatus::Ok);
        assert_eq!((len, n_ood, classes), (3, 0, 1));
        assert_eq!(medood_manifest_info(hood, &mut len, ptr::null_mut(), ptr::null_mut()), MedoodStatus::Ok);
        assert_eq!(len, 4);
        let (mut pos, mut neg) = (0, 0);
        assert_eq!(medood_manifest_polarity(hid, &mut pos, &mut neg), MedoodStatus::Ok);
        assert_eq!((pos, neg), (2, 2));

        let mut r = MedoodBalanceResult::default();
        assert_eq!(medood_estimate_manifests(hid, hood, 0.5, ptr::null(), 0, &mut r), MedoodStatus::Ok);
        assert_eq!((r.pos_count, r.neg_count), (2, 2));
        assert_eq!(r.pct_opt, 0.5);
        assert_eq!(r.ood_selected, 2);
        assert_eq!(r.delta_pnr, 0.0);
        assert_eq!(medood_estimate_manifests(hid, ptr::null(), 0.5, ptr::null(), 0, &mut r), MedoodStatus::NullPointer);

        medood_manifest_free(hid);
        medood_manifest_free(hood);
        medood_manifest_free(ptr::null_mut());

        let mut h: *mut MedoodManifest = ptr::null_mut();
        let missing = cpath(&dir.path().join("missing"));
        assert_eq!(medood_manifest_load(missing.as_ptr(), &mut h), MedoodStatus::Io);
        assert!(h.is_null());
        assert!(last_error().contains("missing"));
        assert_eq!(medood_manifest_load(ptr::null(), &mut h), MedoodStatus::NullPointer);
    }
}

#[test]
fn model_handles_predict_like_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let model = SegmentationModel::new(ModelConfig::new(2, 8, true), 3).unwrap();
    let path = dir.path().join("m.json");
    let names = ClassList::numbered(2).unwrap();
    save_checkpoint(&Checkpoint::from_model(&model, names.names(), 3, None, None), &path).unwrap();

    let mut h: *mut MedoodModel = ptr::null_mut();
    unsafe {
        assert_eq!(medood_model_load(cpath(&path).as_ptr(), &mut h), MedoodStatus::Ok);
        let (mut c, mut p) = (0, 0);
        assert_eq!(medood_model_shape(h, &mut c, &mut p), MedoodStatus::Ok);
        assert_eq!((c, p), (2, 8));

        let image: Vec<u8> = (0..8 * 8 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let mut probs = vec![0f32; 2 * 64];
        assert_eq!(
            medood_model_predict(h, image.as_ptr(), image.len(), probs.as_mut_ptr(), probs.len()),
            MedoodStatus::Ok
        );
        let mut reference = model.clone();
        let patch = Patch {
            id: "x".into(),
            region_id: "x".into(),
            offset: (0, 0),
            pad: (0, 0),
            size: 8,
            image: image.clone(),
            labelmap: vec![0; 64],
            role: Role::Id,
        };
        assert_eq!(probs, predict(&mut reference, &patch).unwrap().data);

        assert_eq!(
            medood_model_predict(h, image.as_ptr(), 10, probs.as_mut_ptr(), probs.len()),
            MedoodStatus::Shape
        );
        assert_eq!(
            medood_model_predict(h, image.as_ptr(), image.len(), probs.as_mut_ptr(), 3),
            MedoodStatus::Shape
        );
        assert_eq!(
            medood_model_predict(ptr::null_mut(), image.as_ptr(), image.len(), probs.as_mut_ptr(), probs.len()),
            MedoodStatus::NullPointer
        );
        medood_model_free(h);
    }

    std::fs::write(dir.path().join("bad.json"), "{").unwrap();
    let mut h: *mut MedoodModel = ptr::null_mut();
    let status = unsafe { medood_model_load(cpath(&dir.path().join("bad.json")).as_ptr(), &mut h) };
    assert_eq!(status, MedoodStatus::Format);
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(medood_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    assert!(header.join("medood.h").exists());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"medood.h\"\n\
         int main(void) {\n\
           double pnr;\n\
           MedoodStatus s = medood_pnr_from_counts(3, 2, &pnr);\n\
           MedoodBalanceResult r;\n\
           MedoodManifest *m = 0;\n\
           (void)r; (void)m;\n\
           return s == MEDOOD_STATUS_OK ? 0 : 1;\n\
         }\n",
    )
    .unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    match Command::new(&cc).arg("-fsyntax-only").arg("-std=c99").arg("-I").arg(&header).arg(&src).output() {
        Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
        Err(e) => eprintln!("skipping header check, {cc} unavailable: {e}"),
    }
}
