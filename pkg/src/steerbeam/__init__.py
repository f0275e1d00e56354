"""steerbeam: a causal, array-geometry-agnostic neural beamformer.

Pipeline: steer channels toward the source with integer + fractional
delay FIR filters, encode 50%-overlap frames into a learned latent space,
estimate per-channel masks with stacked recurrent channel-interaction
blocks, filter-and-sum in the latent domain, decode, and overlap-add.
One parameter set serves any microphone count.
"""

from .geometry import (MultichannelBuffer, ScenePose, SteeringPlan, apply_steering,
                       build_steering_plan, choose_reference, compute_tdoa,
                       delay_and_sum, design_fractional_filter, make_target,
                       perturb_tdoa)
from .framing import FrameSequence, overlap_add, segment
from .model import (ModelConfig, ModelParams, ModelState, NormState, REFERENCE_CONFIG,
                    count_macs, count_params, forward_frame, forward_sequence)
from .streaming import (LatencyReport, StreamState, create_stream, enhance_offline,
                        enhance_streaming, flush, latency_report, push_pull, reset)
from .training import (AdamState, TrainItem, adam_step, si_sdr, si_sdr_with_grad,
                       train_loop)
from .simulate import (RoomImpulseResponse, SceneSpec, image_method_rir, render_scene,
                       sample_random_scene, t60_to_reflection_coeff)
from .audio_io import wav_read, wav_write
from .weights import SceneMetadata, load_scene_metadata, load_weights, save_scene_metadata, save_weights

__version__ = "0.1.0"
