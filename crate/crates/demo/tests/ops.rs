use partgrasp_demo::{grasp_view, object_view, segment_view, VIEW_POINTS};

#[test]
fn object_view_has_one_label_per_point() {
    let v = object_view("mug", 3).unwrap();
    assert_eq!(v.points.len(), VIEW_POINTS);
    assert_eq!(v.labels.len(), VIEW_POINTS);
    assert_eq!(v.part_names, ["body", "handle"]);
    assert!(object_view("teapot", 3).is_err());
}

#[test]
fn segment_view_selects_the_named_part() {
    let o = object_view("knife", 8).unwrap();
    let s = segment_view("knife", 8, "hold the blade of the knife").unwrap();
    assert_eq!(s.part, "blade");
    for (m, l) in s.mask.iter().zip(&o.labels) {
        assert_eq!(*m, o.part_names[*l as usize] == "blade");
    }
    assert!(segment_view("knife", 8, "hold the lid").is_err());
}

#[test]
fn grasp_view_refines_a_perturbed_grasp() {
    let g = grasp_view("pan", 4, "grab the pan by its handle", 0.15, 60).unwrap();
    assert_eq!(g.part, "handle");
    assert_eq!(g.trace.len(), 61);
    assert!(g.objective_after < g.objective_before);
    assert_eq!(g.before.len(), g.after.len());
    let a = serde_json::to_string(&g).unwrap();
    let b = serde_json::to_string(&grasp_view("pan", 4, "grab the pan by its handle", 0.15, 60).unwrap()).unwrap();
    assert_eq!(a, b);
}
