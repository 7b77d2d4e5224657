"""
Persisted experiment runs

A run's numbers live in its report directory; the database keeps the config,
the summary and one snapshot per round for browsing through the admin and
the API.
"""

from django.db import models

from core.models import BaseModel


class ExperimentRun(BaseModel):
    class Status(models.TextChoices):
        QUEUED = 'QUEUED', 'Queued'
        RUNNING = 'RUNNING', 'Running'
        COMPLETED = 'COMPLETED', 'Completed'
        FAILED = 'FAILED', 'Failed'

    name = models.CharField(max_length=200)
    aggregator = models.CharField(max_length=20)
    status = models.CharField(max_length=20, choices=Status.choices, default=Status.QUEUED)
    config = models.JSONField(default=dict, help_text='Normalised experiment configuration')
    summary = models.JSONField(default=dict, blank=True, help_text='Final metrics and detection summary')
    output_dir = models.CharField(max_length=500, blank=True)
    error_message = models.TextField(blank=True)
    started_at = models.DateTimeField(null=True, blank=True)
    finished_at = models.DateTimeField(null=True, blank=True)

    class Meta:
        ordering = ['-created_at']
        verbose_name = 'Experiment Run'
        verbose_name_plural = 'Experiment Runs'

    def __str__(self):
        return f'{self.name} ({self.aggregator}, {self.get_status_display()})'

    @property
    def final_accuracy(self):
        return (self.summary or {}).get('final', {}).get('accuracy')


class RoundSnapshot(BaseModel):
    run = models.ForeignKey(ExperimentRun, on_delete=models.CASCADE, related_name='rounds')
    round_number = models.PositiveIntegerField()
    accuracy = models.FloatField(null=True)
    loss = models.FloatField(null=True)
    firm_malicious = models.PositiveIntegerField(default=0)
    unreliable = models.PositiveIntegerField(default=0)
    no_participants = models.BooleanField(default=False)

    class Meta:
        ordering = ['run', 'round_number']
        unique_together = ['run', 'round_number']
        verbose_name = 'Round Snapshot'
        verbose_name_plural = 'Round Snapshots'

    def __str__(self):
        return f'{self.run.name} round {self.round_number}'
