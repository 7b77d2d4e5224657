from rest_framework import serializers

from core.exceptions import ConfigurationError

from .config import PRESETS, dump_config, load_config
from .models import ExperimentRun, RoundSnapshot


class RoundSnapshotSerializer(serializers.ModelSerializer):
    class Meta:
        model = RoundSnapshot
        fields = ['round_number', 'accuracy', 'loss', 'firm_malicious', 'unreliable', 'no_participants']


class ExperimentRunSerializer(serializers.ModelSerializer):
    class Meta:
        model = ExperimentRun
        fields = ['id', 'name', 'aggregator', 'status', 'config', 'summary', 'output_dir', 'error_message',
                  'created_at', 'started_at', 'finished_at']
        read_only_fields = fields


class ExperimentRunCreateSerializer(serializers.Serializer):
    config = serializers.JSONField()
    preset = serializers.ChoiceField(choices=sorted(PRESETS), required=False, allow_null=True)

    def validate(self, attrs):
        try:
            cfg = load_config(attrs['config'], preset=attrs.get('preset'))
        except ConfigurationError as exc:
            raise serializers.ValidationError({'config': exc.errors or [str(exc)]})
        attrs['experiment'] = cfg
        return attrs

    def create(self, validated_data):
        cfg = validated_data['experiment']
        user = self.context['request'].user
        return ExperimentRun.objects.create(
            name=cfg.name,
            aggregator=cfg.aggregator.kind,
            config=dump_config(cfg),
            output_dir=cfg.output_dir or '',
            created_by=user,
            updated_by=user,
        )

    def to_representation(self, instance):
        return ExperimentRunSerializer(instance).data
