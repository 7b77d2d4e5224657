from rest_framework import mixins, permissions, status, viewsets
from rest_framework.decorators import action
from rest_framework.response import Response

from .api_serializers import ExperimentRunCreateSerializer, ExperimentRunSerializer, RoundSnapshotSerializer
from .models import ExperimentRun
from .tasks import enqueue_run


class ExperimentRunViewSet(mixins.CreateModelMixin, mixins.ListModelMixin, mixins.RetrieveModelMixin,
                           viewsets.GenericViewSet):
    queryset = ExperimentRun.objects.all()
    serializer_class = ExperimentRunSerializer
    permission_classes = [permissions.IsAuthenticated]
    search_fields = ['name', 'aggregator']
    ordering_fields = ['created_at', 'finished_at', 'name']

    def get_serializer_class(self):
        if self.action == 'create':
            return ExperimentRunCreateSerializer
        return ExperimentRunSerializer

    def create(self, request, *args, **kwargs):
        serializer = self.get_serializer(data=request.data)
        serializer.is_valid(raise_exception=True)
        run = serializer.save()
        enqueue_run(run)
        return Response(ExperimentRunSerializer(run).data, status=status.HTTP_201_CREATED)

    @action(detail=True, methods=['get'])
    def rounds(self, request, pk=None):
        run = self.get_object()
        return Response(RoundSnapshotSerializer(run.rounds.all(), many=True).data)
