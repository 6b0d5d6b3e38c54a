//! Static cost analysis of a layer list: output shapes, multiply-accumulate
//! counts, parameter counts and receptive fields.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Shape};

/// Spatial output size of a convolution or pooling window,
/// `floor((H - f + 2p) / s) + 1` per axis.
pub fn conv_output_shape(h: usize, w: usize, f: usize, p: usize, s: usize) -> Result<(usize, usize)> {
    if s == 0 || f == 0 {
        return Err(Error::Config(format!("filter and stride must be >= 1 (f={f}, s={s})")));
    }
    let axis = |n: usize| -> Result<usize> {
        if n + 2 * p < f {
            return Err(Error::Config(format!(
                "window f={f} with padding {p} does not fit an extent of {n}"
            )));
        }
        Ok((n + 2 * p - f) / s + 1)
    };
    Ok((axis(h)?, axis(w)?))
}

/// Multiply-accumulates of one convolution layer: `f² · C_i · C_f · W' · H'`.
pub fn conv_macs(f: u64, c_in: u64, c_out: u64, out_h: u64, out_w: u64) -> u64 {
    f * f * c_in * c_out * out_w * out_h
}

/// Weight count `I · J` of a fully connected layer (biases excluded).
pub fn fc_params(inputs: u64, outputs: u64) -> u64 {
    inputs * outputs
}

/// Receptive field after every windowed (conv or pool) layer, from
/// `r_n = r_{n-1} + (f_n - 1) · ∏_{i<n} s_i` with `r_0 = 1`.
///
/// Activation and fully connected layers have no window and are skipped;
/// [`network_cost`] reports the full input extent for fully connected rows.
pub fn receptive_field(layers: &[LayerSpec]) -> Vec<u64> {
    let mut r = 1u64;
    let mut jump = 1u64;
    layers
        .iter()
        .filter_map(LayerSpec::window)
        .map(|(f, s)| {
            r += (f as u64 - 1) * jump;
            jump *= s as u64;
            r
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub index: usize,
    pub kind: &'static str,
    pub out_channels: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub macs: u64,
    /// Weights only; conv `f²·C_i·C_f`, fully connected `I·J`.
    pub params: u64,
    pub biases: u64,
    pub receptive_field: u64,
    /// Fully connected rows only: `I·J` evaluated with a two-class `J = 2`.
    pub fc_params_two_class: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct NetworkCost {
    pub layers: Vec<LayerCost>,
    pub total_macs: u64,
    pub total_weights: u64,
    pub total_biases: u64,
}

impl NetworkCost {
    pub fn total_params(&self) -> u64 {
        self.total_weights + self.total_biases
    }

    /// Per-layer CSV table followed by a `total` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "layer,kind,out_c,out_h,out_w,macs,params,biases,receptive_field,fc_params_j2\n",
        );
        for l in &self.layers {
            let j2 = l.fc_params_two_class.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                l.index, l.kind, l.out_channels, l.out_h, l.out_w, l.macs, l.params, l.biases, l.receptive_field, j2
            );
        }
        let _ = writeln!(
            out,
            "total,,,,,{},{},{},,",
            self.total_macs, self.total_weights, self.total_biases
        );
        out
    }
}

/// Costs of every layer for an input of shape `input`.
pub fn network_cost(layers: &[LayerSpec], input: Shape) -> Result<NetworkCost> {
    let mut cost = NetworkCost::default();
    let mut cur = input;
    let mut r = 1u64;
    let mut jump = 1u64;
    for (index, spec) in layers.iter().enumerate() {
        let wrap = |e: Error| Error::Shape {
            layer: index,
            message: e.to_string(),
        };
        spec.validate().map_err(wrap)?;
        let out = spec.output_shape(cur).map_err(wrap)?;
        let (mut macs, mut params, mut biases, mut j2) = (0, 0, 0, None);
        match *spec {
            LayerSpec::Conv { filter, .. } => {
                macs = conv_macs(
                    filter as u64,
                    cur.channels as u64,
                    out.channels as u64,
                    out.height as u64,
                    out.width as u64,
                );
                params = macs / (out.height * out.width) as u64;
                biases = out.channels as u64;
            }
            LayerSpec::FullyConnected { out_features } => {
                params = fc_params(cur.len() as u64, out_features as u64);
                macs = params;
                biases = out_features as u64;
                j2 = Some(fc_params(cur.len() as u64, 2));
                r = input.height.max(input.width) as u64;
            }
            _ => {}
        }
        if let Some((f, s)) = spec.window() {
            r += (f as u64 - 1) * jump;
            jump *= s as u64;
        }
        cost.total_macs += macs;
        cost.total_weights += params;
        cost.total_biases += biases;
        cost.layers.push(LayerCost {
            index,
            kind: spec.name(),
            out_channels: out.channels,
            out_h: out.height,
            out_w: out.width,
            macs,
            params,
            biases,
            receptive_field: r,
            fc_params_two_class: j2,
        });
        cur = out;
    }
    Ok(cost)
}

/// CSV table of the receptive field after each windowed layer.
pub fn receptive_field_csv(layers: &[LayerSpec]) -> String {
    let mut out = String::from("layer,kind,f,s,receptive_field\n");
    let fields = receptive_field(layers);
    let windowed = layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.window().map(|w| (i, l, w)));
    for ((i, l, (f, s)), r) in windowed.zip(fields) {
        let _ = writeln!(out, "{i},{},{f},{s},{r}", l.name());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Counts multiply-accumulates by walking every output, filter tap and channel.
    fn brute_force_macs(h: usize, w: usize, f: usize, p: usize, s: usize, c_in: usize, c_out: usize) -> u64 {
        let (oh, ow) = conv_output_shape(h, w, f, p, s).unwrap();
        let mut count = 0u64;
        for _co in 0..c_out {
            for _oy in 0..oh {
                for _ox in 0..ow {
                    for _ci in 0..c_in {
                        for _ky in 0..f {
                            for _kx in 0..f {
                                count += 1;
                            }
                        }
                    }
                }
            }
        }
        count
    }

    #[test]
    fn output_shape_examples() {
        assert_eq!(conv_output_shape(64, 64, 3, 1, 1).unwrap(), (64, 64));
        assert_eq!(conv_output_shape(64, 64, 2, 0, 2).unwrap(), (32, 32));
        assert_eq!(conv_output_shape(1, 1, 1, 0, 1).unwrap(), (1, 1));
        assert_eq!(conv_output_shape(5, 7, 3, 0, 2).unwrap(), (2, 3));
        assert!(conv_output_shape(2, 2, 3, 0, 1).is_err());
        assert!(conv_output_shape(4, 4, 3, 0, 0).is_err());
    }

    #[test]
    fn macs_examples() {
        assert_eq!(conv_macs(3, 1, 8, 32, 32), 73_728);
        assert_eq!(conv_macs(1, 1, 1, 1, 1), 1);
        assert_eq!(brute_force_macs(5, 5, 3, 1, 1, 3, 16), conv_macs(3, 3, 16, 5, 5));
        assert_eq!(conv_macs(3, 3, 16, 64, 64), 1_769_472);
    }

    #[test]
    fn fc_examples() {
        assert_eq!(fc_params(1024, 2), 2048);
        assert_eq!(fc_params(1, 1), 1);
        assert_eq!(fc_params(4096, 2), 8192);
    }

    #[test]
    fn receptive_field_examples() {
        assert_eq!(receptive_field(&[LayerSpec::conv(3, 1, 1, 4)]), vec![3]);
        assert_eq!(
            receptive_field(&[LayerSpec::conv(3, 1, 1, 4), LayerSpec::Relu, LayerSpec::conv(3, 1, 1, 4)]),
            vec![3, 5]
        );
        assert!(receptive_field(&[]).is_empty());
    }

    #[test]
    fn empty_network_costs_nothing() {
        let c = network_cost(&[], Shape::new(1, 8, 8)).unwrap();
        assert_eq!((c.total_macs, c.total_params()), (0, 0));
        assert_eq!(c.to_csv().lines().count(), 2);
    }

    #[test]
    fn shape_errors_carry_layer_index() {
        let layers = [LayerSpec::conv(3, 1, 0, 2), LayerSpec::max_pool(2, 2), LayerSpec::conv(3, 1, 0, 2)];
        match network_cost(&layers, Shape::new(1, 6, 6)) {
            Err(Error::Shape { layer: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn totals_are_additive() {
        let layers = [
            LayerSpec::conv(3, 1, 1, 4),
            LayerSpec::Relu,
            LayerSpec::max_pool(2, 2),
            LayerSpec::conv(3, 1, 1, 6),
            LayerSpec::fully_connected(3),
        ];
        let input = Shape::new(2, 8, 8);
        let whole = network_cost(&layers, input).unwrap();
        let head = network_cost(&layers[..3], input).unwrap();
        let tail = network_cost(&layers[3..], Shape::new(4, 4, 4)).unwrap();
        assert_eq!(whole.total_macs, head.total_macs + tail.total_macs);
        assert_eq!(whole.total_params(), head.total_params() + tail.total_params());
        let sum: u64 = whole.layers.iter().map(|l| l.macs).sum();
        assert_eq!(sum, whole.total_macs);
    }

    #[test]
    fn pooling_is_free() {
        let c = network_cost(&[LayerSpec::max_pool(2, 2)], Shape::new(3, 8, 8)).unwrap();
        assert_eq!((c.layers[0].macs, c.layers[0].params, c.layers[0].biases), (0, 0, 0));
    }
}
