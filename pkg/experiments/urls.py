from django.urls import include, path
from rest_framework.routers import DefaultRouter

from .api_views import ExperimentRunViewSet

router = DefaultRouter()
router.register(r'experiment-runs', ExperimentRunViewSet)

urlpatterns = [
    path('', include(router.urls)),
]
