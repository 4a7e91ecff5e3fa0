use super::{Geometry, Interpolation, Volume, VolumeKind};
use crate::{par, Error, Result};

/// Resamples onto a grid with the given spacing and shape, centred on the
/// input's centre. Voxels outside the input field of view become 0.
pub fn resample<V: Volume>(
    v: &V,
    target_spacing: [f64; 3],
    target_shape: [usize; 3],
    mode: Interpolation,
) -> Result<V> {
    if target_spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidSpacing(target_spacing));
    }
    if target_shape.iter().any(|&n| n == 0) {
        return Err(Error::InvalidArgument(format!(
            "nonpositive target shape {target_shape:?}"
        )));
    }
    let target = v.geometry().recentered(target_spacing, target_shape);
    resample_onto(v, &target, mode)
}

/// Resamples onto an arbitrary reference grid through world coordinates.
pub fn resample_onto<V: Volume>(v: &V, target: &Geometry, mode: Interpolation) -> Result<V> {
    resample_mapped(v, target, mode, |w| w)
}

/// Pull-back resampling: target voxel at world point `w` takes the input value
/// at world point `map(w)`.
pub fn resample_mapped<V, F>(v: &V, target: &Geometry, mode: Interpolation, map: F) -> Result<V>
where
    V: Volume,
    F: Fn([f64; 3]) -> [f64; 3] + Sync + Send,
{
    if V::KIND == VolumeKind::Label && mode != Interpolation::Nearest {
        return Err(Error::InvalidArgument(
            "label volumes must be resampled with nearest interpolation".into(),
        ));
    }
    target.validate()?;
    let src = v.geometry();
    let nx = target.shape[0];
    let mut data = vec![V::Voxel::default(); target.len()];
    par::for_each_chunk_mut(&mut data, nx, |row, out| {
        let y = row % target.shape[1];
        let z = row / target.shape[1];
        for (x, o) in out.iter_mut().enumerate() {
            let w = target.index_to_world([x as f64, y as f64, z as f64]);
            *o = v.sample(src.world_to_index(map(w)), mode);
        }
    });
    Ok(v.rebuild(target.clone(), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{LabelVolume, Volume3D};
    use std::collections::BTreeMap;

    #[test]
    fn identity_resample_is_exact() {
        let g = Geometry::new([7, 6, 5], [1.0, 2.0, 0.5]);
        let v = Volume3D::from_fn(g.clone(), |[x, y, z]| (x * 31 + y * 7 + z) as f32 * 0.1);
        let r = resample(&v, g.spacing, g.shape, Interpolation::Linear).unwrap();
        assert_eq!(r.data, v.data);
    }

    #[test]
    fn constant_field_stays_constant_inside_fov() {
        let g = Geometry::new([8, 8, 8], [1.0; 3]);
        let v = Volume3D::filled(g.clone(), 3.5);
        let r = resample(&v, [0.7, 1.3, 0.9], [11, 6, 9], Interpolation::Linear).unwrap();
        for (o, &val) in r.data.iter().enumerate() {
            let idx = r.geometry.unravel(o);
            let w = r.geometry.index_to_world(idx.map(|i| i as f64));
            let src = g.world_to_index(w);
            let inside = (0..3).all(|a| src[a] >= -0.5 && src[a] <= 7.5);
            if inside {
                assert!((val - 3.5).abs() < 1e-6);
            } else {
                assert_eq!(val, 0.0);
            }
        }
    }

    #[test]
    fn upsampled_ramp_midpoints_are_neighbour_means() {
        let g = Geometry::new([8, 3, 3], [1.0; 3]);
        let v = Volume3D::from_fn(g.clone(), |[x, _, _]| (x * x) as f32);
        // halving the spacing on x puts every odd output sample at a midpoint
        let r = resample(&v, [0.5, 1.0, 1.0], [15, 3, 3], Interpolation::Linear).unwrap();
        for j in 0..15 {
            let got = r.at(j, 1, 1);
            if j % 2 == 0 {
                assert_eq!(got, v.at(j / 2, 1, 1));
            } else {
                let mean = (v.at(j / 2, 1, 1) + v.at(j / 2 + 1, 1, 1)) / 2.0;
                assert!((got - mean).abs() < 1e-5, "j={j} got={got} mean={mean}");
            }
        }
    }

    #[test]
    fn labels_require_nearest_and_stay_in_vocabulary() {
        let g = Geometry::new([6, 6, 6], [1.0; 3]);
        let vocab = BTreeMap::from([(1, "a".into()), (5, "b".into())]);
        let data = (0..g.len()).map(|o| [0u16, 1, 5][o % 3]).collect();
        let l = LabelVolume::new(g, data, vocab).unwrap();
        assert!(resample(&l, [0.5; 3], [12; 3], Interpolation::Linear).is_err());
        let r = resample(&l, [0.6; 3], [11; 3], Interpolation::Nearest).unwrap();
        assert!(r.data.iter().all(|v| [0, 1, 5].contains(v)));
    }

    #[test]
    fn bad_targets_are_rejected() {
        let v = Volume3D::zeros(Geometry::new([4; 3], [1.0; 3]));
        assert!(resample(&v, [0.0, 1.0, 1.0], [4; 3], Interpolation::Linear).is_err());
        assert!(resample(&v, [1.0; 3], [4, 0, 4], Interpolation::Linear).is_err());
    }
}
