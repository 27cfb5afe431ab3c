"""
Schema of the experiment JSON file.

Every object rejects keys it does not declare; optional keys fall back to
``MUXSIM_DEFAULTS`` when the config is turned into domain objects.
"""
from rest_framework import serializers

from apps.placement.services import BACKENDS
from apps.scheduler.domain import SCHEDULER_KINDS
from apps.workload.domain import DistributionError, LengthDistribution

TABLE1 = 'table1'


class StrictSerializer(serializers.Serializer):
    """Serializer that refuses undeclared keys instead of dropping them."""

    def to_internal_value(self, data):
        if isinstance(data, dict):
            unknown = sorted(set(data) - set(self.fields))
            if unknown:
                raise serializers.ValidationError({key: ['Unknown field.'] for key in unknown})
        return super().to_internal_value(data)


class ClusterSerializer(StrictSerializer):
    num_nodes = serializers.IntegerField(min_value=1)
    gpus_per_node = serializers.IntegerField(min_value=1, max_value=8)
    gpu_memory_gb = serializers.FloatField(min_value=1.0)


class LLMSerializer(StrictSerializer):
    name = serializers.CharField(max_length=128)
    num_layers = serializers.IntegerField(min_value=1)
    num_heads = serializers.IntegerField(min_value=1)
    head_dim = serializers.IntegerField(min_value=1, required=False)
    hidden_size = serializers.IntegerField(min_value=1)
    params_b = serializers.FloatField(min_value=0.001)


class LengthSerializer(StrictSerializer):
    kind = serializers.ChoiceField(choices=['constant', 'lognormal', 'empirical'])
    value = serializers.IntegerField(min_value=1, required=False)
    mean = serializers.FloatField(required=False)
    sigma = serializers.FloatField(required=False)
    histogram = serializers.DictField(child=serializers.FloatField(min_value=0.0), required=False)

    def validate(self, attrs):
        try:
            attrs['distribution'] = LengthDistribution.from_descriptor(attrs)
        except DistributionError as e:
            raise serializers.ValidationError(str(e))
        return attrs


class LLMLengthsSerializer(StrictSerializer):
    prompt_len = LengthSerializer(required=False)
    output_len = LengthSerializer(required=False)


class WorkloadSerializer(StrictSerializer):
    alpha = serializers.FloatField(min_value=0.0, required=False)
    max_rate = serializers.FloatField(min_value=0.0, required=False)
    rates = serializers.DictField(child=serializers.FloatField(min_value=0.0), required=False)
    rate_scale = serializers.FloatField(min_value=0.0, required=False)
    horizon_s = serializers.FloatField(required=False)
    prompt_len = LengthSerializer(required=False)
    output_len = LengthSerializer(required=False)
    per_llm = serializers.DictField(child=LLMLengthsSerializer(), required=False)

    def validate_horizon_s(self, value):
        if value <= 0:
            raise serializers.ValidationError("horizon_s must be positive.")
        return value


class ProfileSerializer(StrictSerializer):
    prefill_ms_per_token = serializers.FloatField(min_value=0.0, required=False)
    decode_ms_per_step = serializers.FloatField(min_value=0.0, required=False)
    decode_ms_per_context_token = serializers.FloatField(min_value=0.0, required=False)
    tp_efficiency = serializers.FloatField(min_value=0.01, max_value=1.0, required=False)
    sm_saturation = serializers.FloatField(min_value=0.01, max_value=1.0, required=False)
    batch_knee = serializers.IntegerField(min_value=1, required=False)
    reference_size = serializers.IntegerField(min_value=1, required=False)


class PlacementSerializer(StrictSerializer):
    backend = serializers.ChoiceField(choices=list(BACKENDS), required=False)
    sm_list = serializers.ListField(child=serializers.FloatField(min_value=0.01, max_value=1.0),
                                    allow_empty=False, required=False)
    tp_degrees = serializers.ListField(child=serializers.ChoiceField(choices=[1, 2, 4, 8]),
                                       allow_empty=False, required=False)
    ilp_max_dims = serializers.IntegerField(min_value=1, required=False)
    activation_reserve = serializers.FloatField(min_value=0.0, max_value=0.9, required=False)
    max_batch = serializers.IntegerField(min_value=1, required=False)
    gen_len = serializers.FloatField(min_value=1.0, required=False)
    prompt_len = serializers.FloatField(min_value=1.0, required=False)


class KVSerializer(StrictSerializer):
    block_tokens = serializers.IntegerField(min_value=1, required=False)
    bytes_per_element = serializers.IntegerField(min_value=1, required=False)
    quota_floor = serializers.FloatField(min_value=0.0, max_value=1.0, required=False)
    low_mark = serializers.FloatField(min_value=0.0, max_value=1.0, required=False)
    high_mark = serializers.FloatField(min_value=0.0, max_value=1.0, required=False)
    step = serializers.FloatField(min_value=0.0, max_value=1.0, required=False)
    adapt_period_s = serializers.FloatField(min_value=0.001, required=False)
    adapt = serializers.BooleanField(required=False)

    def validate(self, attrs):
        low = attrs.get('low_mark')
        high = attrs.get('high_mark')
        if low is not None and high is not None and low > high:
            raise serializers.ValidationError("low_mark must not exceed high_mark.")
        return attrs


class SchedulerSerializer(StrictSerializer):
    kind = serializers.ChoiceField(choices=list(SCHEDULER_KINDS), required=False)
    prefill_token_budget = serializers.IntegerField(min_value=1, required=False)
    min_prefill_sm = serializers.FloatField(min_value=0.01, max_value=1.0, required=False)
    decode_sm = serializers.FloatField(min_value=0.01, max_value=1.0, required=False)
    max_batch = serializers.IntegerField(min_value=1, required=False)
    fairness_epsilon = serializers.FloatField(min_value=0.0, required=False)


class SimulationSerializer(StrictSerializer):
    interference = serializers.FloatField(min_value=0.0, required=False)
    debug_checks = serializers.BooleanField(required=False)
    record_decisions = serializers.BooleanField(required=False)


class MetricsSerializer(StrictSerializer):
    slo_scales = serializers.ListField(child=serializers.FloatField(min_value=0.001),
                                       allow_empty=False, required=False)


class AblationSerializer(StrictSerializer):
    rate_scales = serializers.ListField(child=serializers.FloatField(min_value=0.001),
                                        allow_empty=False, required=False)
    schedulers = serializers.ListField(child=serializers.ChoiceField(choices=list(SCHEDULER_KINDS)),
                                       allow_empty=False, required=False)


class ExperimentConfigSerializer(StrictSerializer):
    seed = serializers.IntegerField(min_value=0, required=False)
    cluster = ClusterSerializer()
    llms = serializers.JSONField(required=False)
    workload = WorkloadSerializer(required=False)
    profile = ProfileSerializer(required=False)
    placement = PlacementSerializer(required=False)
    kv = KVSerializer(required=False)
    scheduler = SchedulerSerializer(required=False)
    simulation = SimulationSerializer(required=False)
    metrics = MetricsSerializer(required=False)
    ablation = AblationSerializer(required=False)

    def validate_llms(self, value):
        if value == TABLE1:
            return value
        if not isinstance(value, list) or not value:
            raise serializers.ValidationError(f'Expected "{TABLE1}" or a non-empty list of LLMs.')
        catalog = LLMSerializer(data=value, many=True)
        catalog.is_valid(raise_exception=True)
        names = [entry['name'] for entry in catalog.validated_data]
        if len(set(names)) != len(names):
            raise serializers.ValidationError("LLM names must be unique.")
        return catalog.validated_data

    def validate(self, attrs):
        llms = attrs.get('llms', TABLE1)
        workload = attrs.get('workload', {})
        if llms != TABLE1:
            names = {entry['name'] for entry in llms}
            for section in ('rates', 'per_llm'):
                unknown = sorted(set(workload.get(section, {})) - names)
                if unknown:
                    raise serializers.ValidationError(
                        {'workload': [f"{section} names unknown LLMs: {', '.join(unknown)}"]})
        return attrs
